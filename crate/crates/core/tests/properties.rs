use proptest::prelude::*;

use automask::adversarial::sample_pseudo_mask;
use automask::autodiff::Tensor;
use automask::checkpoint::Checkpoint;
use automask::data::{bbox_to_patches, generate_sample_with_mask, BBox, IMAGE_SIZE};
use automask::generator::{build_mask_plan, gumbel_mask, sample_gamma, topk_indices, visualize_mask};
use automask::mae::{bbox_boosted_plan, dropped_count, random_mask_plan};
use automask::rng::stream;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_partition_the_patches(n in 2usize..100, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let plan = random_mask_plan(n, ratio, &mut stream(seed, "p", 0)).unwrap();
        prop_assert_eq!(plan.dropped().len(), dropped_count(n, ratio));
        let mut all: Vec<usize> = plan.visible().iter().chain(plan.dropped()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!plan.visible().is_empty());
    }

    #[test]
    fn boosted_patches_are_dropped_first(seed in any::<u64>(), k in 1usize..16) {
        let mut rng = stream(seed, "b", 0);
        let weights: Vec<f64> = (0..64).map(|i| ((i * 37 + seed as usize) % 64) as f64).collect();
        let top = topk_indices(&weights, k).unwrap();
        let plan = build_mask_plan(sample_gamma(&top, 64, 1.0, &mut rng).unwrap(), 0.75).unwrap();
        for i in top {
            prop_assert!(plan.is_dropped(i));
        }
        let bbox: Vec<usize> = (0..k).collect();
        let plan = bbox_boosted_plan(64, &bbox, 1.0, 0.75, &mut rng).unwrap();
        prop_assert!(bbox.iter().all(|&i| plan.is_dropped(i)));
    }

    #[test]
    fn topk_picks_the_largest(values in prop::collection::vec(-10.0f64..10.0, 1..40), k in 1usize..40) {
        let k = k.min(values.len());
        let top = topk_indices(&values, k).unwrap();
        prop_assert_eq!(top.len(), k);
        let threshold = top.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min);
        let above = values.iter().filter(|&&v| v > threshold).count();
        prop_assert!(above <= k);
    }

    #[test]
    fn pseudo_masks_respect_ranges(seed in any::<u64>(), grid in 2usize..12, alpha in 0.0f64..2.0) {
        let m = sample_pseudo_mask(grid, grid, alpha, &mut stream(seed, "pm", 0)).unwrap();
        let a = m.area_fraction();
        prop_assert!((0.2..=0.8).contains(&a), "area {}", a);
        for (i, &v) in m.values.iter().enumerate() {
            if m.rect.contains(i / grid, i % grid) {
                prop_assert!(v >= alpha && v < alpha + 1.0);
            } else {
                prop_assert!((0.0..1.0).contains(&v));
            }
        }
    }

    #[test]
    fn mask_fields_are_distributions(seed in any::<u64>(), n in 1usize..80, scale in 0.0f64..20.0, tau in 0.1f64..4.0) {
        let mut rng = stream(seed, "mf", 0);
        let logits = Tensor::<f64>::from_fn(&[n], |i| scale * ((i * 7919 % 97) as f64 / 97.0 - 0.5));
        let field = gumbel_mask(&logits, &mut rng, tau).unwrap();
        prop_assert!((field.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(field.weights.iter().all(|&w| w >= 0.0));
        let lse: f64 = field.pre_noise_logits.iter().map(|l| l.exp()).sum();
        prop_assert!((lse - 1.0).abs() < 1e-9);
    }

    #[test]
    fn visualization_marks_a_quarter(seed in any::<u64>()) {
        let mut rng = stream(seed, "viz", 0);
        let logits = Tensor::<f64>::from_fn(&[1, 64], |i| (i as f64 * 1.7 + seed as f64).sin());
        let field = gumbel_mask(&logits, &mut rng, 1.0).unwrap();
        prop_assert_eq!(visualize_mask(&field).iter().filter(|&&b| b).count(), 16);
    }

    #[test]
    fn foreground_stays_inside_its_box(seed in 0u64..1000, index in 0usize..1000) {
        let (s, mask) = generate_sample_with_mask(seed, index, 0.05);
        for (i, &fg) in mask.iter().enumerate() {
            if fg {
                prop_assert!(s.bbox.contains(i / IMAGE_SIZE, i % IMAGE_SIZE));
            }
        }
        prop_assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let area = s.bbox.area() as f64 / (IMAGE_SIZE * IMAGE_SIZE) as f64;
        prop_assert!((0.1..=0.6).contains(&area), "area {}", area);
    }

    #[test]
    fn bbox_patches_match_a_pixel_scan(top in 0usize..32, left in 0usize..32, h in 1usize..32, w in 1usize..32) {
        let bbox = BBox { top, left, height: h.min(32 - top), width: w.min(32 - left) };
        let mut expected = std::collections::BTreeSet::new();
        for y in 0..32 {
            for x in 0..32 {
                if bbox.contains(y, x) {
                    expected.insert((y / 4) * 8 + x / 4);
                }
            }
        }
        let got: std::collections::BTreeSet<usize> = bbox_to_patches(&bbox, 4, 8).into_iter().collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn checkpoint_bytes_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..50), scalar in any::<f64>()) {
        let mut c = Checkpoint::new();
        c.insert("a.weight", &Tensor::new(&[values.len()], values.clone()).unwrap());
        c.insert_scalar("train.step", scalar);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.get("a.weight").unwrap().data(), &values[..]);
        prop_assert_eq!(back.scalar("train.step").unwrap().to_bits(), scalar.to_bits());
    }
}
