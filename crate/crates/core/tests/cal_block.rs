mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sysanchor::cal::{cal_forward, CalDecoder, CalParams, CrossAttnMask};
use sysanchor::init::Init;
use sysanchor::{BatchBounds, SpanBounds, Tensor};

fn block(d: usize, heads: usize, seed: u64) -> CalParams<f32> {
    let mut p = CalParams::new(d, heads, &mut Init::new(seed)).unwrap();
    randomize_cal(&mut p, &mut rng(seed ^ 0xca1), 0.4);
    p
}

#[test]
fn every_small_span_matches_oracle() {
    let mut r = rng(11);
    let mut cases = 0;
    for t in 1..=8 {
        for s in 0..t {
            for e in s..=t {
                let p = block(8, 2, cases);
                let x = uniform(&mut r, &[1, t, 8], 1.5);
                let span = if e == s { SpanBounds::NONE } else { SpanBounds::new(s, e).unwrap() };
                let bounds = BatchBounds::new(vec![span]);
                let (y, _) = cal_forward(&x, &bounds, &p).unwrap();
                let err = max_abs_diff(y.data(), &cal_oracle(&x, &bounds, &p));
                assert!(err <= 1e-5, "t={t} s={s} e={e}: {err}");
                cases += 1;
            }
        }
    }
    assert_eq!(cases, 156);
}

#[test]
fn random_larger_batches_match_oracle() {
    let mut r = rng(12);
    for case in 0..100 {
        let heads = [1, 2, 4][r.random_range(0..3)];
        let d = heads * r.random_range(2..=6);
        let (b, t) = (r.random_range(1..=4), r.random_range(9..=24));
        let p = block(d, heads, 100 + case);
        let x = uniform(&mut r, &[b, t, d], 1.5);
        let bounds = BatchBounds::new((0..b).map(|_| random_span(&mut r, t)).collect());
        let (y, _) = cal_forward(&x, &bounds, &p).unwrap();
        let err = max_abs_diff(y.data(), &cal_oracle(&x, &bounds, &p));
        assert!(err <= 1e-5, "case {case} b={b} t={t} d={d} {bounds:?}: {err}");
    }
}

#[test]
fn mask_has_three_zones() {
    let (s, ell, t) = (3, 4, 10);
    let m = CrossAttnMask::build(s, ell, t).unwrap();
    for i in 0..t {
        let open: Vec<usize> = (0..ell).filter(|&j| m.is_open(i, j)).collect();
        match i {
            i if i < s => assert!(open.is_empty(), "pre-span row {i}"),
            i if i < s + ell => assert_eq!(open, (0..=i - s).collect::<Vec<_>>(), "in-span row {i}"),
            _ => assert_eq!(open, (0..ell).collect::<Vec<_>>(), "post-span row {i}"),
        }
    }
    let padded = CrossAttnMask::build_padded(s, ell, t, 6).unwrap();
    assert!((0..t).all(|i| !padded.is_open(i, 4) && !padded.is_open(i, 5)));
    let dense = padded.to_tensor::<f32>();
    assert_eq!(dense.shape(), &[t, 6]);
    assert_eq!(dense.data()[9 * 6], 0.0);
    assert_eq!(dense.data()[0], f32::NEG_INFINITY);
    assert!(CrossAttnMask::build(8, 4, 10).is_err());
}

#[test]
fn rows_before_span_ignore_span_content() {
    let p = block(8, 2, 5);
    let mut r = rng(6);
    let x = uniform(&mut r, &[1, 9, 8], 1.0);
    let bounds = BatchBounds::new(vec![SpanBounds::new(4, 7).unwrap()]);
    let (y0, _) = cal_forward(&x, &bounds, &p).unwrap();
    // perturb span position 5: rows < 5 must not move, rows >= 5 should
    let mut x1 = x.clone();
    x1.data_mut()[5 * 8..6 * 8].iter_mut().for_each(|v| *v += 0.7);
    let (y1, _) = cal_forward(&x1, &bounds, &p).unwrap();
    for i in 0..9 {
        let diff = max_abs_diff_f32(&y0.data()[i * 8..(i + 1) * 8], &y1.data()[i * 8..(i + 1) * 8]);
        if i < 5 {
            assert_eq!(diff, 0.0, "row {i}");
        } else {
            assert!(diff > 1e-4, "row {i} did not react");
        }
    }
}

#[test]
fn empty_bounds_pass_through() {
    let p = block(8, 1, 9);
    let x = uniform(&mut rng(9), &[2, 5, 8], 1.0);
    let bounds = BatchBounds::new(vec![SpanBounds::NONE, SpanBounds::new(0, 2).unwrap()]);
    let (y, probe) = cal_forward(&x, &bounds, &p).unwrap();
    assert_eq!(&y.data()[..40], &x.data()[..40]);
    assert_ne!(&y.data()[40..], &x.data()[40..]);
    assert_eq!(probe.block_delta_norm[0], 0.0);
}

#[test]
fn fresh_block_is_identity() {
    let mut r = rng(21);
    for case in 0..20 {
        let p: CalParams<f32> = CalParams::new(16, 4, &mut Init::new(case)).unwrap();
        let t = r.random_range(1..20);
        let x = uniform(&mut r, &[2, t, 16], 2.0);
        let bounds = BatchBounds::new((0..2).map(|_| random_span(&mut r, t)).collect());
        let (y, _) = cal_forward(&x, &bounds, &p).unwrap();
        assert!(max_abs_diff_f32(y.data(), x.data()) <= 1e-5);
    }
}

#[test]
fn decoding_matches_full_forward_with_constant_cache() {
    let (d, ell, steps) = (8, 5, 50);
    let p = block(d, 1, 33);
    let t = 3 + ell + steps;
    let x = uniform(&mut rng(34), &[1, t, d], 1.0);
    let bounds = BatchBounds::new(vec![SpanBounds::new(3, 3 + ell).unwrap()]);
    let (full, _) = cal_forward(&x, &bounds, &p).unwrap();

    let prefix_len = 3 + ell;
    let prefix = Tensor::new(vec![1, prefix_len, d], x.data()[..prefix_len * d].to_vec()).unwrap();
    let mut dec = CalDecoder::new(&p);
    assert!(dec.step(&Tensor::zeros(&[1, d]), &[0]).is_err());
    dec.prefill(&prefix, &bounds).unwrap();
    let mut sizes = Vec::new();
    for pos in prefix_len..t {
        let row = Tensor::new(vec![1, d], x.data()[pos * d..(pos + 1) * d].to_vec()).unwrap();
        let y = dec.step(&row, &[pos]).unwrap();
        let err = max_abs_diff_f32(y.data(), &full.data()[pos * d..(pos + 1) * d]);
        assert!(err <= 1e-5, "step at {pos}: {err}");
        sizes.push(dec.cache().unwrap().element_count());
    }
    assert_eq!(sizes.len(), steps);
    assert!(sizes.iter().all(|&n| n == 2 * ell * d), "{sizes:?}");
    assert_eq!(sizes[0], 80);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // a query never reads a position after itself
    #[test]
    fn block_is_causal(seed in 0u64..10_000, t in 2usize..12, cut in 0usize..11) {
        let cut = cut % (t - 1);
        let mut r = rng(seed);
        let p = block(8, 2, seed);
        let x = uniform(&mut r, &[1, t, 8], 1.0);
        let bounds = BatchBounds::new(vec![random_span(&mut r, t)]);
        let (y0, _) = cal_forward(&x, &bounds, &p).unwrap();
        let mut x1 = x.clone();
        for v in &mut x1.data_mut()[(cut + 1) * 8..] {
            *v = -*v + 0.3;
        }
        let (y1, _) = cal_forward(&x1, &bounds, &p).unwrap();
        prop_assert_eq!(&y0.data()[..(cut + 1) * 8], &y1.data()[..(cut + 1) * 8]);
    }

    #[test]
    fn mask_openness_is_the_allowed_set(s in 0usize..8, ell in 0usize..8, extra in 0usize..4) {
        let t = s + ell + extra;
        let m = CrossAttnMask::build_padded(s, ell, t, ell + 2).unwrap();
        let span = if ell == 0 { SpanBounds::NONE } else { SpanBounds::new(s, s + ell).unwrap() };
        for i in 0..t {
            let open: Vec<usize> = (0..ell + 2).filter(|&j| m.is_open(i, j)).map(|j| s + j).collect();
            prop_assert_eq!(open, allowed_keys(span, i));
        }
    }
}
