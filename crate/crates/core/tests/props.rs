//! Randomized invariants for masks, captions, and matching.

use gcgkit_core::assignment::optimal_assignment;
use gcgkit_core::grounded::{parse_grounded, render_grounded, ParseMode};
use gcgkit_core::mask::{
    box_iou, greedy_nms, mask_from_box, mask_iou, mask_overlap, mask_union, BBox, BinaryMask,
    ScoredDetection,
};
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = (u32, u32, Vec<u8>)> {
    (1u32..=24, 1u32..=24).prop_flat_map(|(w, h)| {
        prop::collection::vec(0u8..=1, (w * h) as usize).prop_map(move |g| (w, h, g))
    })
}

fn bbox_strategy(w: u32, h: u32) -> impl Strategy<Value = BBox> {
    (0..w, 0..h).prop_flat_map(move |(x0, y0)| {
        (x0 + 1..=w, y0 + 1..=h).prop_map(move |(x1, y1)| BBox::new(x0, y0, x1, y1).unwrap())
    })
}

proptest! {
    #[test]
    fn rle_grid_round_trip((w, h, grid) in grid_strategy()) {
        let mask = BinaryMask::from_grid(w, h, &grid).unwrap();
        prop_assert_eq!(mask.to_grid(), grid.clone());
        prop_assert_eq!(mask.area(), grid.iter().filter(|&&c| c == 1).count() as u64);
        let json = serde_json::to_string(&mask).unwrap();
        let back: BinaryMask = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, mask);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(
        (w, h, ga) in grid_strategy(),
        seed in any::<u64>(),
    ) {
        // Second grid derived by a cheap deterministic scramble.
        let gb: Vec<u8> = ga
            .iter()
            .enumerate()
            .map(|(i, &c)| if (seed >> (i % 64)) & 1 == 1 { 1 - c } else { c })
            .collect();
        let a = BinaryMask::from_grid(w, h, &ga).unwrap();
        let b = BinaryMask::from_grid(w, h, &gb).unwrap();
        let ab = mask_iou(&a, &b).unwrap();
        let ba = mask_iou(&b, &a).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!((0.0..=1.0).contains(&ab));
        if ga == gb && ga.iter().any(|&c| c == 1) {
            prop_assert_eq!(ab, 1.0);
        }
    }

    #[test]
    fn union_bounds_and_idempotence((w, h, ga) in grid_strategy(), (_, _, gmix) in grid_strategy()) {
        let gb: Vec<u8> = ga
            .iter()
            .zip(gmix.iter().cycle())
            .map(|(&x, &y)| x ^ y)
            .collect();
        let a = BinaryMask::from_grid(w, h, &ga).unwrap();
        let b = BinaryMask::from_grid(w, h, &gb).unwrap();
        let u = mask_union(&a, &b).unwrap();
        let (inter, union_count) = mask_overlap(&a, &b).unwrap();
        prop_assert_eq!(u.area(), union_count);
        prop_assert_eq!(u.area() + inter, a.area() + b.area());
        prop_assert_eq!(mask_union(&a, &a).unwrap(), a);
    }

    #[test]
    fn box_rasterization_matches_dense(
        (w, h) in (1u32..=24, 1u32..=24),
        seed in any::<u64>(),
    ) {
        // Derive a box from the seed instead of nesting strategies.
        let x0 = (seed % w as u64) as u32;
        let y0 = ((seed >> 8) % h as u64) as u32;
        let x1 = x0 + 1 + ((seed >> 16) % (w - x0) as u64) as u32;
        let y1 = y0 + 1 + ((seed >> 24) % (h - y0) as u64) as u32;
        let b = BBox::new(x0, y0, x1, y1).unwrap();
        let mut dense = vec![0u8; (w * h) as usize];
        for y in y0..y1 {
            for x in x0..x1 {
                dense[(y * w + x) as usize] = 1;
            }
        }
        let from_box = mask_from_box(&b, w, h).unwrap();
        let from_grid = BinaryMask::from_grid(w, h, &dense).unwrap();
        prop_assert_eq!(from_box, from_grid);
    }

    #[test]
    fn box_iou_matches_rasterized_mask_iou(
        a in bbox_strategy(24, 18),
        b in bbox_strategy(24, 18),
    ) {
        // Same integer intersection/union either way, so exactly equal.
        let ma = mask_from_box(&a, 24, 18).unwrap();
        let mb = mask_from_box(&b, 24, 18).unwrap();
        prop_assert_eq!(box_iou(&a, &b), mask_iou(&ma, &mb).unwrap());
    }

    #[test]
    fn caption_build_parse_render_round_trip(
        units in prop::collection::vec(
            (any::<bool>(), prop::collection::vec("[a-z]{1,6}", 1..=3)),
            0..=6,
        ),
    ) {
        let mut raw = String::new();
        let mut plain_words: Vec<String> = Vec::new();
        let mut phrases: Vec<String> = Vec::new();
        for (is_phrase, words) in &units {
            if !raw.is_empty() {
                raw.push(' ');
            }
            let text = words.join(" ");
            if *is_phrase {
                raw.push_str(&format!("<p>{text}</p><SEG>"));
                phrases.push(text.clone());
            } else {
                raw.push_str(&text);
            }
            plain_words.extend(words.iter().cloned());
        }
        let parsed = parse_grounded(&raw, ParseMode::Strict).unwrap();
        prop_assert_eq!(&parsed.plain_text, &plain_words.join(" "));
        let got: Vec<&str> = parsed.spans.iter().map(|s| s.phrase.as_str()).collect();
        prop_assert_eq!(got, phrases.iter().map(String::as_str).collect::<Vec<_>>());
        for (i, sp) in parsed.spans.iter().enumerate() {
            prop_assert_eq!(sp.seg_index, i);
            prop_assert_eq!(&parsed.plain_text[sp.char_start..sp.char_end], sp.phrase.as_str());
        }
        let rendered = render_grounded(&parsed.plain_text, &parsed.spans).unwrap();
        prop_assert_eq!(&rendered, &raw);
        let tolerant = parse_grounded(&raw, ParseMode::Tolerant).unwrap();
        prop_assert_eq!(tolerant, parsed);
    }

    #[test]
    fn token_free_text_is_identity(text in "[ a-z.,]{0,40}") {
        let parsed = parse_grounded(&text, ParseMode::Strict).unwrap();
        prop_assert_eq!(parsed.plain_text, text);
    }

    #[test]
    fn assignment_structure_and_optimality(
        values in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 1..=5), 1..=5),
    ) {
        let n_gt = values[0].len();
        let values: Vec<Vec<f64>> =
            values.into_iter().map(|mut r| { r.resize(n_gt, 0.0); r }).collect();
        let n_pred = values.len();
        let res = optimal_assignment(&values);
        prop_assert_eq!(res.pairs.len(), n_pred.min(n_gt));
        let mut preds: Vec<usize> = res.pairs.iter().map(|p| p.0).collect();
        let mut gts: Vec<usize> = res.pairs.iter().map(|p| p.1).collect();
        preds.dedup();
        gts.sort_unstable();
        gts.dedup();
        prop_assert_eq!(preds.len(), res.pairs.len(), "pred indices repeat");
        prop_assert_eq!(gts.len(), res.pairs.len(), "gt indices repeat");
        // No worse than the straight diagonal pairing.
        let diag: f64 = (0..n_pred.min(n_gt)).map(|i| values[i][i]).sum();
        prop_assert!(res.total >= diag - 1e-9, "total {} < diagonal {}", res.total, diag);
        for &(p, g, v) in &res.pairs {
            prop_assert_eq!(v.to_bits(), values[p][g].to_bits());
        }
    }

    #[test]
    fn nms_kept_set_is_consistent(
        raw in prop::collection::vec((0u32..20, 0u32..20, 1u32..8, 1u32..8, 0.0f64..=1.0), 0..=12),
        tau in 0.1f64..=0.9,
    ) {
        let dets: Vec<ScoredDetection> = raw
            .iter()
            .map(|&(x, y, dw, dh, score)| {
                ScoredDetection::new(
                    BBox::new(x, y, x + dw, y + dh).unwrap(),
                    score,
                    "m",
                    "thing",
                )
                .unwrap()
            })
            .collect();
        let kept = greedy_nms(&dets, tau);
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]), "kept indices not ascending");
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(
                    box_iou(&dets[a].bbox, &dets[b].bbox) < tau,
                    "kept pair overlaps at or above tau"
                );
            }
        }
        // Every suppressed detection overlaps a kept one that outranks it.
        for i in 0..dets.len() {
            if kept.contains(&i) {
                continue;
            }
            let blocked = kept.iter().any(|&k| {
                let outranks = dets[k].score > dets[i].score
                    || (dets[k].score == dets[i].score && k < i);
                outranks && box_iou(&dets[i].bbox, &dets[k].bbox) >= tau
            });
            prop_assert!(blocked, "detection {i} suppressed without a blocker");
        }
    }
}
