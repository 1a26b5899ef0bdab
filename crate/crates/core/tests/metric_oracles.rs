mod oracles;

use lvseg_core::detector::iou;
use lvseg_core::metrics::{apd, apd_with, conformity, dice, evaluate_sequence, extract_contour, ApdMode, ApdOptions, Stat};
use lvseg_core::sequence::{BoundingBox, Mask};
use lvseg_core::MaskSequence;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oracles::contour::{blob, brute_apd, brute_mean};

#[test]
fn apd_matches_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let (a, b) = (blob(&mut rng, h, w), blob(&mut rng, h, w));
        let spacing = if case % 2 == 0 { (1.0, 1.0) } else { (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)) };
        let fast = apd(&a, &b, spacing).unwrap();
        let slow = brute_apd(&a, &b, spacing);
        assert_eq!(fast, slow, "case {} ({}x{})", case, h, w);
    }
}

#[test]
fn apd_fixtures() {
    let mut a = Mask::filled(8, 8, 0);
    let mut b = a.clone();
    a.set(0, 0, 1);
    b.set(3, 4, 1);
    assert_eq!(apd(&a, &b, (1.0, 1.0)).unwrap(), 5.0);
    let sq = |off: usize| Mask::from_fn(16, 16, |y, x| u8::from((3..13).contains(&y) && (3 + off..13 + off).contains(&x)));
    assert_eq!(apd(&sq(0), &sq(1), (1.0, 1.0)).unwrap(), brute_apd(&sq(0), &sq(1), (1.0, 1.0)));
    assert_eq!(apd(&sq(0), &sq(0), (1.0, 1.0)).unwrap(), 0.0);
    let one = ApdOptions { mode: ApdMode::OneDirectional, ..ApdOptions::new((1.0, 1.0)) };
    let mut dot = Mask::filled(16, 16, 0);
    dot.set(1, 1, 1);
    let (ca, cb) = (extract_contour(&dot).points, extract_contour(&sq(0)).points);
    assert_eq!(apd_with(&dot, &sq(0), &one).unwrap(), brute_mean(&ca, &cb, (1.0, 1.0)));
    assert!(apd_with(&dot, &sq(0), &one).unwrap() < apd(&dot, &sq(0), (1.0, 1.0)).unwrap());
}

#[test]
fn empty_masks_use_the_penalty() {
    let e = Mask::filled(3, 4, 0);
    let f = Mask::filled(3, 4, 1);
    assert_eq!(apd(&e, &e, (1.0, 1.0)).unwrap(), 0.0);
    assert_eq!(apd(&e, &f, (1.0, 1.0)).unwrap(), 5.0);
    assert_eq!(apd(&f, &e, (2.0, 2.0)).unwrap(), 10.0);
    let o = ApdOptions { empty_penalty_mm: Some(7.5), ..ApdOptions::new((1.0, 1.0)) };
    assert_eq!(apd_with(&f, &e, &o).unwrap(), 7.5);
}

#[test]
fn dice_and_conformity_match_direct_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let a = Mask::from_fn(h, w, |_, _| u8::from(rng.random_bool(0.4)));
        let b = Mask::from_fn(h, w, |_, _| u8::from(rng.random_bool(0.4)));
        let (mut i, mut na, mut nb) = (0, 0, 0);
        for y in 0..h {
            for x in 0..w {
                let (p, q) = (a.get(y, x) == 1, b.get(y, x) == 1);
                na += p as usize;
                nb += q as usize;
                i += (p && q) as usize;
            }
        }
        let expect = if na + nb == 0 { 1.0 } else { 2.0 * i as f64 / (na + nb) as f64 };
        let d = dice(&a, &b).unwrap();
        assert_eq!(d, expect);
        if d > 0.0 {
            assert_eq!(conformity(d), (3.0 * d - 2.0) / d);
        }
    }
    let a = Mask::new(1, 6, vec![1, 1, 1, 1, 0, 0]).unwrap();
    let b = Mask::new(1, 6, vec![0, 0, 1, 1, 1, 1]).unwrap();
    assert_eq!(dice(&a, &b).unwrap(), 0.5);
    assert!(dice(&a, &Mask::filled(2, 3, 0)).is_err());
}

#[test]
fn conformity_reference_values() {
    assert_eq!(conformity(1.0), 1.0);
    assert!(conformity(2.0 / 3.0).abs() < 1e-15);
    assert!((conformity(0.9745) - 0.9477).abs() <= 0.0005);
    assert!((conformity(0.9745) - 0.9472).abs() < 1e-3);
    assert_eq!(conformity(0.0), f64::NEG_INFINITY);
}

#[test]
fn sequence_summary_is_hand_computed() {
    let truth = MaskSequence::new(vec![Mask::from_fn(1, 4, |_, x| u8::from(x < 2)); 3]).unwrap();
    let pred = MaskSequence::new(vec![
        Mask::new(1, 4, vec![1, 1, 0, 0]).unwrap(),
        Mask::new(1, 4, vec![1, 0, 0, 0]).unwrap(),
        Mask::new(1, 4, vec![1, 1, 1, 1]).unwrap(),
    ])
    .unwrap();
    let r = evaluate_sequence(&pred, &truth, &ApdOptions::new((1.0, 1.0)), "s").unwrap();
    let d = [1.0, 2.0 / 3.0, 2.0 / 3.0];
    let mean = (1.0 + 4.0 / 3.0) / 3.0;
    let std = ((d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()) / 3.0).sqrt();
    assert!((r.summary.dice.mean - mean).abs() < 1e-15);
    assert!((r.summary.dice.std - std).abs() < 1e-15);
    let same = evaluate_sequence(&truth, &truth, &ApdOptions::new((1.0, 1.0)), "s").unwrap();
    assert_eq!(same.summary.dice, Stat { mean: 1.0, std: 0.0 });
    assert_eq!(same.summary.apd_mm, Stat { mean: 0.0, std: 0.0 });
    assert_eq!(same.summary.conformity, Stat { mean: 1.0, std: 0.0 });
    assert_eq!(Stat { mean: 0.9745, std: 0.0163 }.cell(), "0.9745(0.0163)");
}

fn mask_strategy() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
        (prop::collection::vec(0u8..2, h * w), prop::collection::vec(0u8..2, h * w))
            .prop_map(move |(a, b)| (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap()))
    })
}

fn box_strategy() -> impl Strategy<Value = BoundingBox> {
    (0usize..20, 0usize..20, 1usize..20, 1usize..20).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in mask_strategy()) {
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        if a.count() > 0 {
            prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn apd_is_symmetric((a, b) in mask_strategy()) {
        let x = apd(&a, &b, (1.0, 1.5)).unwrap();
        prop_assert_eq!(x, apd(&b, &a, (1.0, 1.5)).unwrap());
        prop_assert_eq!(apd(&a, &a, (1.0, 1.5)).unwrap(), 0.0);
    }

    #[test]
    fn conformity_is_increasing(a in 0.001f64..1.0, b in 0.001f64..1.0) {
        if a < b {
            prop_assert!(conformity(a) < conformity(b));
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in box_strategy(), b in box_strategy()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }
}
