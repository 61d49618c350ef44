//! Checks run-length IoU against a dense pixel-counting oracle on random
//! masks. The oracle never touches the run representation: it rasterizes
//! both masks to byte grids and counts.

use gcgkit_core::mask::{mask_overlap, BinaryMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random mask built from a few rectangles plus salt-and-pepper noise, so
/// run lengths vary from long to single-pixel.
fn random_grid(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<u8> {
    let mut grid = vec![0u8; w * h];
    for _ in 0..rng.gen_range(0..4) {
        let x0 = rng.gen_range(0..w);
        let y0 = rng.gen_range(0..h);
        let x1 = rng.gen_range(x0..=w.min(x0 + w / 2 + 1));
        let y1 = rng.gen_range(y0..=h.min(y0 + h / 2 + 1));
        for y in y0..y1 {
            for x in x0..x1 {
                grid[y * w + x] = 1;
            }
        }
    }
    // Sparse single-pixel flips so unit-length runs appear.
    for _ in 0..rng.gen_range(0..64) {
        let idx = rng.gen_range(0..grid.len());
        grid[idx] ^= 1;
    }
    grid
}

fn dense_overlap(a: &[u8], b: &[u8]) -> (u64, u64) {
    let mut inter = 0;
    let mut union = 0;
    for (&x, &y) in a.iter().zip(b) {
        if x == 1 && y == 1 {
            inter += 1;
        }
        if x == 1 || y == 1 {
            union += 1;
        }
    }
    (inter, union)
}

#[test]
fn run_walk_matches_dense_oracle_on_500_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1017);
    let start = std::time::Instant::now();
    for case in 0..500 {
        let w = rng.gen_range(1..=256usize);
        let h = rng.gen_range(1..=256usize);
        let ga = random_grid(&mut rng, w, h);
        let gb = random_grid(&mut rng, w, h);
        let ma = BinaryMask::from_grid(w as u32, h as u32, &ga).unwrap();
        let mb = BinaryMask::from_grid(w as u32, h as u32, &gb).unwrap();
        let (inter, union) = mask_overlap(&ma, &mb).unwrap();
        let (want_inter, want_union) = dense_overlap(&ga, &gb);
        assert_eq!((inter, union), (want_inter, want_union), "case {case} ({w}x{h})");
        // Round-trip while the dense grid is at hand.
        assert_eq!(ma.to_grid(), ga, "case {case} grid round-trip");
    }
    assert!(start.elapsed().as_secs() < 5, "oracle comparison too slow");
}

#[test]
fn empty_and_full_extremes_agree_with_oracle() {
    for (w, h) in [(1usize, 1usize), (1, 256), (256, 1), (17, 3)] {
        let empty = vec![0u8; w * h];
        let full = vec![1u8; w * h];
        let me = BinaryMask::from_grid(w as u32, h as u32, &empty).unwrap();
        let mf = BinaryMask::from_grid(w as u32, h as u32, &full).unwrap();
        assert_eq!(mask_overlap(&me, &mf).unwrap(), (0, (w * h) as u64));
        assert_eq!(mask_overlap(&mf, &mf).unwrap(), ((w * h) as u64, (w * h) as u64));
        assert_eq!(mask_overlap(&me, &me).unwrap(), (0, 0));
    }
}
