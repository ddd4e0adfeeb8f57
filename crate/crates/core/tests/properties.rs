use std::collections::BTreeMap;

use dlct::attention::{cra, graph_softmax, mhlcca, AttentionInputs, AttentionMask, ProjectionVars};
use dlct::data::{generate_corpus, FeatureBundle};
use dlct::geometry::{
    grid_positional_encoding, relative_geometry_embed, relative_geometry_matrix, geometry_embedding, relative_geometry_raw,
    BoundingBox, GridLayout,
};
use dlct::metrics::{corpus_bleu, sentence_bleu, CiderScorer, CorpusStats, MAX_N};
use dlct::model::{Dlct, ForwardCtx, ModelConfig};
use dlct::numerics::{Tape, Tensor};
use dlct::training::{beam_search, ModelStepper};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0u32..900, 0u32..900, 20u32..400, 20u32..400).prop_filter_map("inside the unit square", |(x, y, w, h)| {
        let s = 1000.0;
        BoundingBox::new(x as f64 / s, y as f64 / s, ((x + w) as f64 / s).min(1.0), ((y + h) as f64 / s).min(1.0)).ok()
    })
}

fn arb_tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-30.0f64..30.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

const WORDS: [&str; 8] = ["a", "red", "blue", "circle", "square", "left", "of", "above"];

fn arb_caption() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(0usize..WORDS.len(), 1..10).prop_map(|ids| ids.into_iter().map(|i| WORDS[i].to_string()).collect())
}

fn arb_corpus() -> impl Strategy<Value = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>)> {
    prop::collection::vec((arb_caption(), prop::collection::vec(arb_caption(), 1..4)), 1..6)
        .prop_map(|items| items.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_positive_and_sum_to_one(x in arb_tensor(vec![4, 7])) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_last(v).unwrap();
        for row in tape.value(s).data().chunks(7) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn broadcasting_matches_materialized_operands(a in arb_tensor(vec![3, 1, 4]), b in arb_tensor(vec![5, 1])) {
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let wide = tape.mul(va, vb).unwrap();
        let ma = tape.constant(a.broadcast_to(&[3, 5, 4]).unwrap());
        let mb = tape.constant(b.broadcast_to(&[3, 5, 4]).unwrap());
        let full = tape.mul(ma, mb).unwrap();
        prop_assert_eq!(tape.value(wide).data(), tape.value(full).data());
    }

    #[test]
    fn grid_cells_are_valid_boxes(rows in 1usize..40, cols in 1usize..40) {
        let layout = GridLayout::new(rows, cols).unwrap();
        let cells = layout.cell_boxes();
        prop_assert_eq!(cells.len(), rows * cols);
        for c in cells {
            let [x0, y0, x1, y1] = c.corners();
            prop_assert!(BoundingBox::new(x0, y0, x1, y1).is_ok());
        }
    }

    #[test]
    fn grid_encoding_is_injective(rows in 1usize..24, cols in 1usize..24, quarter in 1usize..8) {
        let layout = GridLayout::new(rows, cols).unwrap();
        let pe = grid_positional_encoding(layout, 4 * quarter).unwrap();
        let d = 4 * quarter;
        let mut seen = BTreeMap::new();
        for (i, row) in pe.data().chunks(d).enumerate() {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            prop_assert!(seen.insert(key, i).is_none(), "cells collide");
        }
    }

    #[test]
    fn scaling_about_a_point_keeps_size_ratios_and_offsets(
        boxes in prop::collection::vec(arb_box(), 1..6),
        s in 0.2f64..1.0,
        px in 0.0f64..1.0,
        py in 0.0f64..1.0,
    ) {
        let scaled: Vec<BoundingBox> = boxes
            .iter()
            .map(|b| {
                let [x0, y0, x1, y1] = b.corners();
                BoundingBox::new(px + (x0 - px) * s, py + (y0 - py) * s, px + (x1 - px) * s, py + (y1 - py) * s).unwrap()
            })
            .collect();
        for (i, bi) in boxes.iter().enumerate() {
            for (j, bj) in boxes.iter().enumerate() {
                let (a, b) = (relative_geometry_raw(bi, bj), relative_geometry_raw(&scaled[i], &scaled[j]));
                prop_assert!((a[2] - b[2]).abs() < 1e-9 && (a[3] - b[3]).abs() < 1e-9);
                // Offsets keep their value unless the clamp engages, which
                // shifts them by -ln(s) for the scaled copy.
                for c in 0..2 {
                    let d = b[c] - a[c];
                    prop_assert!(d.abs() < 1e-9 || d <= -s.ln() + 1e-9, "component {} moved by {}", c, d);
                }
            }
        }
        // With a zero geometry projection the attention distribution cannot
        // depend on the boxes at all.
        let n = boxes.len();
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let q = Tensor::from_fn(&[n, 4], |_| rng.gen_range(-1.0..1.0));
        let mut weights = Vec::new();
        for set in [&boxes, &scaled] {
            let mut tape = Tape::new();
            let emb = tape.constant(geometry_embedding(&relative_geometry_matrix(set, set)).unwrap());
            let wg = tape.constant(Tensor::zeros(&[1, 64]));
            let bias = relative_geometry_embed(&mut tape, emb, wg).unwrap();
            let x = tape.constant(q.clone());
            let om = tape.reshape(bias.omega, &[n, n]).unwrap();
            let out = cra(&mut tape, &AttentionInputs::new(x, x, x).with_omega(Some(dlct::geometry::GeometryBias { omega: om }))).unwrap();
            weights.push(tape.value(out.weights).clone());
        }
        prop_assert!(weights[0].max_abs_diff(&weights[1]) <= 1e-12);
    }

    #[test]
    fn masked_entries_get_exactly_zero_weight(
        (rows, cols, allowed) in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(any::<bool>(), r * c))),
        seed in 0u64..1000,
    ) {
        let mask = AttentionMask::new(rows, cols, allowed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let mut t = |shape: &[usize]| tape.constant(Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0)));
        let p: Vec<_> = (0..4).flat_map(|_| [t(&[4, 4]), t(&[4])]).collect();
        let (q, k) = (t(&[rows, 4]), t(&[cols, 4]));
        let params = ProjectionVars { wq: p[0], bq: p[1], wk: p[2], bk: p[3], wv: p[4], bv: p[5], wo: p[6], bo: p[7] };
        let out = mhlcca(&mut tape, &AttentionInputs::new(q, k, k).with_mask(&mask), &params, 2, None).unwrap();
        let w = tape.value(out.weights).clone();
        for h in 0..2 {
            for i in 0..rows {
                let mut sum = 0.0;
                for j in 0..cols {
                    if !mask.allowed(i, j) {
                        prop_assert_eq!(w.at(&[h, i, j]), 0.0);
                    }
                    sum += w.at(&[h, i, j]);
                }
                prop_assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-12);
            }
        }
        if mask.empty_rows().is_empty() {
            let s = tape.constant(Tensor::from_fn(&[rows, cols], |i| i as f64 * 0.37));
            prop_assert!(graph_softmax(&mut tape, s, &mask).is_ok());
        }
    }

    #[test]
    fn metrics_ignore_consistent_relabeling((cands, refs) in arb_corpus(), shift in 1usize..WORDS.len()) {
        let relabel = |c: &Vec<String>| -> Vec<String> {
            c.iter().map(|w| WORDS[(WORDS.iter().position(|x| x == w).unwrap() + shift) % WORDS.len()].to_string()).collect()
        };
        let cands2: Vec<_> = cands.iter().map(relabel).collect();
        let refs2: Vec<Vec<_>> = refs.iter().map(|rs| rs.iter().map(relabel).collect()).collect();
        let a = CiderScorer::new(CorpusStats::build(&refs).unwrap()).corpus(&cands, &refs).unwrap();
        let b = CiderScorer::new(CorpusStats::build(&refs2).unwrap()).corpus(&cands2, &refs2).unwrap();
        // Renaming words reorders the n-gram maps, so sums may differ in the last bit.
        prop_assert!((a.0 - b.0).abs() <= 1e-12 * a.0.abs().max(1.0));
        prop_assert_eq!(corpus_bleu(&cands, &refs, MAX_N).unwrap(), corpus_bleu(&cands2, &refs2, MAX_N).unwrap());
    }

    #[test]
    fn metrics_are_bounded_and_repeatable((cands, refs) in arb_corpus()) {
        let scorer = CiderScorer::new(CorpusStats::build(&refs).unwrap());
        let (mean, each) = scorer.corpus(&cands, &refs).unwrap();
        prop_assert!((0.0..=10.0 + 1e-9).contains(&mean));
        prop_assert!(each.iter().all(|s| (0.0..=10.0 + 1e-9).contains(s)));
        prop_assert_eq!(mean.to_bits(), scorer.corpus(&cands, &refs).unwrap().0.to_bits());
        for b in corpus_bleu(&cands, &refs, MAX_N).unwrap() {
            prop_assert!((0.0..=1.0).contains(&b));
        }
        for (c, r) in cands.iter().zip(&refs) {
            prop_assert!((0.0..=1.0).contains(&sentence_bleu(c, r, MAX_N).unwrap()));
        }
    }

    #[test]
    fn encoder_is_equivariant_to_region_order(seed in 0u64..500, n in 2usize..5) {
        let mut c = ModelConfig::desk(8);
        c.d_model = 16;
        c.d_ff = 16;
        c.layers = 1;
        c.grid = GridLayout::new(3, 3).unwrap();
        let model = Dlct::new(c.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes: Vec<BoundingBox> = (0..n)
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6));
                BoundingBox::new(x, y, x + rng.gen_range(0.1..0.4), y + rng.gen_range(0.1..0.4)).unwrap()
            })
            .collect();
        let regions = Tensor::from_fn(&[n, c.region_dim], |_| rng.gen_range(-1.0..1.0));
        let grids = Tensor::from_fn(&[9, c.grid_dim], |_| rng.gen_range(-1.0..1.0));
        let perm: Vec<usize> = (0..n).rev().collect();
        let d = c.region_dim;
        let pr = Tensor::new(vec![n, d], perm.iter().flat_map(|&i| regions.data()[i * d..(i + 1) * d].to_vec()).collect()).unwrap();
        let pb: Vec<BoundingBox> = perm.iter().map(|&i| boxes[i]).collect();
        let encode = |b: FeatureBundle| {
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, false);
            let m = model.encode(&mut tape, &bound, &b, &mut ForwardCtx::default()).unwrap();
            tape.value(m).clone()
        };
        let a = encode(FeatureBundle::new(regions, grids.clone(), boxes, c.grid).unwrap());
        let b = encode(FeatureBundle::new(pr, grids, pb, c.grid).unwrap());
        let w = c.d_model;
        for (new, &old) in perm.iter().enumerate() {
            for k in 0..w {
                prop_assert!((b.data()[new * w + k] - a.data()[old * w + k]).abs() < 1e-12);
            }
        }
        for k in n * w..a.numel() {
            prop_assert!((a.data()[k] - b.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn no_beam_width_beats_the_full_width_optimum(seed in 0u64..1000) {
        let (model, bundle) = tiny_decoder(seed);
        let max_len = model.config().max_len;
        let full = beam_search(&mut ModelStepper::new(&model, &bundle).unwrap(), 5usize.pow(max_len as u32), max_len).unwrap();
        for k in 1..=6 {
            let got = beam_search(&mut ModelStepper::new(&model, &bundle).unwrap(), k, max_len).unwrap();
            prop_assert!(got.log_probs[0] <= full.log_probs[0] + 1e-12);
            prop_assert!(got.log_probs.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}

fn tiny_decoder(seed: u64) -> (Dlct, FeatureBundle) {
    let mut c = ModelConfig::desk(7);
    c.d_model = 8;
    c.heads = 2;
    c.d_ff = 8;
    c.layers = 1;
    c.max_len = 5;
    c.grid = GridLayout::new(2, 2).unwrap();
    let model = Dlct::new(c.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundle = FeatureBundle::new(
        Tensor::from_fn(&[2, c.region_dim], |_| rng.gen_range(-1.0..1.0)),
        Tensor::from_fn(&[4, c.grid_dim], |_| rng.gen_range(-1.0..1.0)),
        vec![BoundingBox::new(0.1, 0.1, 0.5, 0.6).unwrap(), BoundingBox::new(0.4, 0.2, 0.9, 0.9).unwrap()],
        c.grid,
    )
    .unwrap();
    (model, bundle)
}

/// Widening the beam can lose a hypothesis a narrower beam kept: here width 3
/// scores below widths 1 and 2, while width 4 reaches the optimum.
#[test]
fn beam_width_is_not_monotone() {
    let (model, bundle) = tiny_decoder(95);
    let best = |k| beam_search(&mut ModelStepper::new(&model, &bundle).unwrap(), k, 5).unwrap().log_probs[0];
    assert!(best(3) < best(2));
    assert!(best(4) > best(2));
}

#[test]
fn leave_one_out_references_score_positively() {
    let data = generate_corpus(60, 4, GridLayout::new(4, 4).unwrap()).unwrap();
    let vocab = data.vocab().unwrap();
    let refs = dlct::training::reference_words(&vocab, &data.train);
    let scorer = CiderScorer::new(CorpusStats::build(&refs).unwrap());
    for r in &refs {
        for i in 0..r.len() {
            let rest: Vec<Vec<String>> = r.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| x.clone()).collect();
            assert!(scorer.score(&r[i], &rest).unwrap() > 0.0);
            assert!(sentence_bleu(&r[i], &rest, MAX_N).unwrap() > 0.0);
        }
    }
}
