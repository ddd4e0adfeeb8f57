use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_corpus, FeatureBundle, BOS, EOS};
use crate::geometry::{BoundingBox, GridLayout};
use crate::numerics::{GradCheck, NumericsError, Tape, Var};

fn tiny_config(vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::desk(vocab);
    c.d_model = 8;
    c.heads = 2;
    c.layers = 1;
    c.d_ff = 8;
    c.grid = GridLayout::new(2, 2).unwrap();
    c.region_dim = 3;
    c.grid_dim = 3;
    c.max_len = 6;
    c
}

fn random_bundle(rng: &mut ChaCha8Rng, c: &ModelConfig, n: usize) -> FeatureBundle {
    let boxes: Vec<BoundingBox> = (0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..0.6);
            let y = rng.gen_range(0.0..0.6);
            BoundingBox::new(x, y, x + rng.gen_range(0.1..0.4), y + rng.gen_range(0.1..0.4)).unwrap()
        })
        .collect();
    let regions = Tensor::from_fn(&[n, c.region_dim], |_| rng.gen_range(-1.0..1.0));
    let grids = Tensor::from_fn(&[c.grid.len(), c.grid_dim], |_| rng.gen_range(-1.0..1.0));
    FeatureBundle::new(regions, grids, boxes, c.grid).unwrap()
}

fn encode_value(model: &Dlct, bundle: &FeatureBundle) -> Tensor {
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, false);
    let m = model.encode(&mut tape, &b, bundle, &mut ForwardCtx::default()).unwrap();
    tape.value(m).clone()
}

#[test]
fn encoder_output_shape_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = ModelConfig::desk(26);
    let model = Dlct::new(c.clone(), 3).unwrap();
    let bundle = random_bundle(&mut rng, &c, 5);
    let a = encode_value(&model, &bundle);
    assert_eq!(a.shape(), &[5 + 16, 64]);
    let again = Dlct::new(c, 3).unwrap();
    assert_eq!(a.data(), encode_value(&again, &bundle).data());
}

#[test]
fn zero_layers_concatenates_projected_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut c = tiny_config(6);
    c.layers = 0;
    let model = Dlct::new(c.clone(), 1).unwrap();
    let bundle = random_bundle(&mut rng, &c, 2);
    let out = encode_value(&model, &bundle);
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, false);
    let p = |tape: &mut Tape, name: &str| tape.value(b.var(model.params().find(name).unwrap())).clone();
    let (w, bias) = (p(&mut tape, "enc.region_in.proj.w"), p(&mut tape, "enc.region_in.proj.b"));
    let x = tape.constant(bundle.regions.clone());
    let wv = tape.constant(w);
    let bv = tape.constant(bias);
    let h = crate::attention::linear(&mut tape, x, wv, bv).unwrap();
    let h = tape.relu(h).unwrap();
    let g = tape.constant(Tensor::ones(&[c.d_model]));
    let z = tape.constant(Tensor::zeros(&[c.d_model]));
    let h = tape.layer_norm(h, g, z, 1e-5).unwrap();
    assert_eq!(&out.data()[..2 * c.d_model], tape.value(h).data());
}

#[test]
fn region_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = tiny_config(6);
    let model = Dlct::new(c.clone(), 2).unwrap();
    let bundle = random_bundle(&mut rng, &c, 3);
    let perm = [2, 0, 1];
    let d = c.region_dim;
    let regions = Tensor::from_fn(&[3, d], |i| bundle.regions.data()[perm[i / d] * d + i % d]);
    let boxes = perm.iter().map(|&p| bundle.boxes[p]).collect();
    let permuted = FeatureBundle::new(regions, bundle.grids.clone(), boxes, c.grid).unwrap();
    let a = encode_value(&model, &bundle);
    let b = encode_value(&model, &permuted);
    let dm = c.d_model;
    for (i, &p) in perm.iter().enumerate() {
        for j in 0..dm {
            assert!((b.at(&[i, j]) - a.at(&[p, j])).abs() < 1e-12);
        }
    }
    for r in 3..3 + c.grid.len() {
        for j in 0..dm {
            assert!((b.at(&[r, j]) - a.at(&[r, j])).abs() < 1e-12);
        }
    }
}

#[test]
fn streams_are_independent_without_cross_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut c = tiny_config(6);
    c.variant.cross = CrossMode::NoLcca;
    let model = Dlct::new(c.clone(), 5).unwrap();
    assert!(model.params().names().iter().all(|n| !n.contains("lcca")));
    let bundle = random_bundle(&mut rng, &c, 2);
    let mut other = bundle.clone();
    other.grids = Tensor::from_fn(other.grids.shape(), |_| rng.gen_range(-1.0..1.0));
    let a = encode_value(&model, &bundle);
    let b = encode_value(&model, &other);
    let n = 2 * c.d_model;
    assert_eq!(&a.data()[..n], &b.data()[..n]);
    assert_ne!(&a.data()[n..], &b.data()[n..]);
}

#[test]
fn ablation_variants_share_one_code_path() {
    let base = ModelConfig::desk(26);
    let mut names = Vec::new();
    for (features, cross) in [
        (FeatureMode::Dual, CrossMode::Lcca),
        (FeatureMode::Dual, CrossMode::Cbg),
        (FeatureMode::Dual, CrossMode::NoLcca),
        (FeatureMode::GridOnly, CrossMode::Lcca),
        (FeatureMode::RegionOnly, CrossMode::Lcca),
        (FeatureMode::Concat, CrossMode::Lcca),
    ] {
        for position in [PositionMode::Cra, PositionMode::NoCra, PositionMode::PeOnly] {
            let mut c = base.clone();
            c.variant = Variant { features, cross, position };
            let model = Dlct::new(c.clone(), 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let bundle = random_bundle(&mut rng, &c, 3);
            let out = encode_value(&model, &bundle);
            assert_eq!(out.shape()[0], model.memory_len(&bundle));
            assert!(out.all_finite());
            if position == PositionMode::Cra {
                names.push((features, cross, model.params().names().to_vec()));
            }
        }
    }
    // the complete-bipartite variant has exactly the parameters of the full model
    assert_eq!(names[0].2, names[1].2);
}

#[test]
fn reference_parameter_count_is_stable() {
    let model = Dlct::new(ModelConfig::reference(10_000), 0).unwrap();
    let n = model.params().scalar_count();
    assert_eq!(n, Dlct::new(ModelConfig::reference(10_000), 1).unwrap().params().scalar_count());
    assert_eq!(n, REFERENCE_PARAMS);
}

/// Scalar count of the reference configuration over a 10k vocabulary.
const REFERENCE_PARAMS: usize = 62_795_024;

fn logits(model: &Dlct, bundle: &FeatureBundle, tokens: &[Vec<usize>]) -> Tensor {
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, false);
    let mut ctx = ForwardCtx::default();
    let m = model.encode(&mut tape, &b, bundle, &mut ctx).unwrap();
    let l = model.decode(&mut tape, &b, m, tokens, &mut ctx).unwrap();
    tape.value(l).clone()
}

#[test]
fn decoder_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = tiny_config(7);
    let model = Dlct::new(c.clone(), 7).unwrap();
    let bundle = random_bundle(&mut rng, &c, 2);
    for _ in 0..10 {
        let t = rng.gen_range(2..=c.max_len);
        let mut seq: Vec<usize> = (0..t).map(|_| rng.gen_range(2..7)).collect();
        seq[0] = BOS;
        let base = logits(&model, &bundle, &[seq.clone()]);
        assert_eq!(base.shape(), &[1, t, 7]);
        for pos in 1..t {
            let mut m = seq.clone();
            for x in m.iter_mut().skip(pos) {
                *x = (*x + 1) % 7;
            }
            let mutated = logits(&model, &bundle, &[m]);
            let n = pos * 7;
            assert_eq!(&base.data()[..n], &mutated.data()[..n], "prefix before {pos} changed");
        }
    }
}

#[test]
fn incremental_decoding_matches_full_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = ModelConfig::desk(26);
    let model = Dlct::new(c.clone(), 8).unwrap();
    let bundle = random_bundle(&mut rng, &c, 4);
    let seqs: Vec<Vec<usize>> = (0..3)
        .map(|_| std::iter::once(BOS).chain((1..7).map(|_| rng.gen_range(3..26))).collect())
        .collect();
    let full = logits(&model, &bundle, &seqs);
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, false);
    let mut ctx = ForwardCtx::default();
    let m = model.encode(&mut tape, &b, &bundle, &mut ctx).unwrap();
    let mut cache = model.start_decoding(&mut tape, &b, m).unwrap();
    // shuffle beams between steps to exercise the cache reordering
    let mut order: Vec<usize> = vec![0, 1, 2];
    for t in 0..7 {
        let parents: Vec<usize> = if t == 0 { vec![0, 1, 2] } else { vec![2, 0, 1] };
        order = parents.iter().map(|&p| order[p]).collect();
        let tokens: Vec<usize> = order.iter().map(|&s| seqs[s][t]).collect();
        let lp = model.decode_step(&mut tape, &b, &mut cache, &parents, &tokens, &mut ctx).unwrap();
        for (beam, &s) in order.iter().enumerate() {
            let row = &full.data()[(s * 7 + t) * 26..(s * 7 + t + 1) * 26];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for w in 0..26 {
                assert!((tape.value(lp).at(&[beam, w]) - (row[w] - lse)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn decoder_rejects_bad_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let c = tiny_config(7);
    let model = Dlct::new(c.clone(), 1).unwrap();
    let bundle = random_bundle(&mut rng, &c, 1);
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, false);
    let mut ctx = ForwardCtx::default();
    let m = model.encode(&mut tape, &b, &bundle, &mut ctx).unwrap();
    assert!(model.decode(&mut tape, &b, m, &[vec![BOS; 7]], &mut ctx).is_err());
    assert!(model.decode(&mut tape, &b, m, &[vec![EOS, 3]], &mut ctx).is_err());
    assert!(model.decode(&mut tape, &b, m, &[vec![BOS, 3], vec![BOS]], &mut ctx).is_err());
}

#[test]
fn feature_mismatch_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let c = tiny_config(7);
    let model = Dlct::new(c.clone(), 1).unwrap();
    let mut c2 = c.clone();
    c2.region_dim = 5;
    let bad = random_bundle(&mut rng, &c2, 2);
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, false);
    assert!(model.encode(&mut tape, &b, &bad, &mut ForwardCtx::default()).is_err());
}

/// Scalar loss over the full network with parameters supplied as tape inputs.
pub(crate) fn network_loss<'a>(model: &'a Dlct, bundle: &FeatureBundle, tokens: &[Vec<usize>]) -> impl Fn(&mut Tape, &[Var]) -> std::result::Result<Var, NumericsError> + 'a {
    let tokens = tokens.to_vec();
    let bundle = bundle.clone();
    move |tape: &mut Tape, vars: &[Var]| {
        let b = Bound::from_vars(vars.to_vec());
        let mut ctx = ForwardCtx::default();
        let wrap = |e: crate::error::Error| NumericsError::Shape(e.to_string());
        let m = model.encode(tape, &b, &bundle, &mut ctx).map_err(wrap)?;
        let l = model.decode(tape, &b, m, &tokens, &mut ctx).map_err(wrap)?;
        let n = tape.value(l).numel();
        let w = tape.constant(Tensor::from_fn(tape.shape(l), |i| ((i * 7 % 13) as f64 / 13.0 - 0.5) / n as f64 * 10.0));
        let s = tape.mul(l, w)?;
        tape.sum(s)
    }
}

#[test]
fn full_network_gradcheck_one_coordinate_per_tensor() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = tiny_config(6);
    let model = Dlct::new(c.clone(), 12).unwrap();
    let bundle = random_bundle(&mut rng, &c, 2);
    let inputs: Vec<Tensor> = model.params().tensors().to_vec();
    let coords: Vec<(usize, usize)> = inputs.iter().enumerate().map(|(i, t)| (i, rng.gen_range(0..t.numel()))).collect();
    let f = network_loss(&model, &bundle, &[vec![BOS, 4, 3], vec![BOS, 5, 2]]);
    let report = GradCheck::default().run_many(f, &inputs, &coords).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn desk_corpus_bundle_runs_through_desk_model() {
    let data = generate_corpus(20, 1, GridLayout::new(4, 4).unwrap()).unwrap();
    let model = Dlct::new(ModelConfig::desk(26), 0).unwrap();
    let out = encode_value(&model, &data.train[0].features);
    assert_eq!(out.shape()[0], data.train[0].features.n_regions() + 16);
}
