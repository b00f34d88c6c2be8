mod common;

use common::{energy_gradient_check, naive_prediction_attention, rand_arr};
use ebwm::data::SequenceBatch;
use ebwm::ebt::{
    ebt_attention, ebt_block, encode_context, energy, energy_forward, raw_prediction_scores,
};
use ebwm::nn::{causal_stack, init_params, rms_norm, BlockWeights};
use ebwm::{Family, Mode, ModelConfig};
use ebwm_autodiff::{grad, NdArray, Tape, Tensor};

fn cfg(d: usize, heads: usize, mode: Mode) -> ModelConfig {
    ModelConfig {
        embed_dim: d,
        heads,
        init_std: 0.4,
        ..ModelConfig::desk(mode, 6, 8)
    }
}

#[test]
fn batched_attention_matches_row_oracle() {
    for sep in [false, true] {
        for scaled in [true, false] {
            for (t, h) in [(1, 1), (3, 2), (5, 4), (8, 2)] {
                let mut c = cfg(8, h, Mode::Continuous);
                c.separate_prediction_projections = sep;
                c.scale_self_score = scaled;
                let seed = (t * 10 + h) as u64;
                let p = init_params(&c, Family::Ebwm, seed).unwrap().constants();
                let w = BlockWeights::from_bound(&p, 0).unwrap();
                let x_o = rand_arr(&[2, t, 8], seed + 1);
                let x_p = rand_arr(&[2, t, 8], seed + 2);
                let a = ebt_attention(
                    &Tensor::constant(x_o.clone()),
                    &Tensor::constant(x_p.clone()),
                    &w,
                    &c,
                )
                .unwrap();
                let oracle = naive_prediction_attention(&x_o, &x_p, &w, &c);
                let err = a.z_p.value().max_abs_diff(&oracle);
                assert!(err < 1e-9, "sep {sep} scaled {scaled} t {t} h {h}: {err}");
            }
        }
    }
}

#[test]
fn score_matrix_layout() {
    let c = cfg(8, 2, Mode::Continuous);
    let p = init_params(&c, Family::Ebwm, 3).unwrap().constants();
    let w = BlockWeights::from_bound(&p, 0).unwrap();
    let t = 4;
    let x_o = Tensor::constant(rand_arr(&[1, t, 8], 4));
    let x_p = Tensor::constant(rand_arr(&[1, t, 8], 5));
    let raw = raw_prediction_scores(&x_o, &x_p, &w, &c).unwrap();
    assert_eq!(raw.shape(), &[1, 2, t, t + 1]);
    let probs = ebt_attention(&x_o, &x_p, &w, &c).unwrap().probs_p;
    assert_eq!(probs.shape(), &[1, 2, t, t + 1]);
    for (r, chunk) in probs.value().data().chunks(t + 1).enumerate() {
        let i = r % t;
        assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(chunk[i + 2..].iter().all(|&x| x == 0.0));
        assert!(chunk[..i + 2].iter().all(|&x| x > 0.0));
    }
}

#[test]
fn observed_stream_matches_baseline_stack() {
    let c = cfg(16, 4, Mode::Continuous);
    let p = init_params(&c, Family::Ebwm, 8).unwrap().constants();
    let blocks = BlockWeights::all(&p, &c).unwrap();
    let z = Tensor::constant(rand_arr(&[2, 6, 16], 9));
    let mut z_o = z.clone();
    let mut z_p = Tensor::constant(rand_arr(&[2, 6, 16], 10));
    for w in &blocks {
        (z_o, z_p) = ebt_block(&z_o, &z_p, w, &c).unwrap();
    }
    let base = causal_stack(&z, &blocks, &c).unwrap();
    assert!(z_o.value().max_abs_diff(base.value()) <= 1e-12);
    assert!(z_p.value().is_finite());

    let batch = SequenceBatch::continuous(rand_arr(&[2, 7, 6], 11)).unwrap();
    let ctx = encode_context(&p, &c, &batch).unwrap();
    let emb = ebwm::nn::baseline::embed_context(&p, &c, &batch).unwrap();
    let base = causal_stack(&emb, &blocks, &c).unwrap();
    assert!(ctx.z_o.value().bit_eq(base.value()));
}

#[test]
fn cached_energy_matches_block_by_block_forward() {
    let c = cfg(8, 2, Mode::Continuous);
    let p = init_params(&c, Family::Ebwm, 12).unwrap().constants();
    let batch = SequenceBatch::continuous(rand_arr(&[2, 5, 6], 13)).unwrap();
    let cand = Tensor::constant(rand_arr(&[2, 4, 6], 14));
    let e = energy(&p, &c, &batch, &cand).unwrap();

    let mut z_o = ebwm::nn::baseline::embed_context(&p, &c, &batch).unwrap();
    let mut z_p = ebwm::nn::baseline::project_input(&p, &cand).unwrap();
    for w in BlockWeights::all(&p, &c).unwrap() {
        (z_o, z_p) = ebt_block(&z_o, &z_p, &w, &c).unwrap();
    }
    let z = rms_norm(&z_p, p.get("final_norm").unwrap(), c.norm_eps).unwrap();
    let head = p.get("energy_head").unwrap().value();
    let bias = p.get("energy_bias").unwrap().value().data()[0];
    for (r, zr) in z.value().data().chunks(8).enumerate() {
        let expect: f64 = zr.iter().zip(head.data()).map(|(a, b)| a * b).sum::<f64>() + bias;
        assert!((e.energies.value().data()[r] - expect).abs() < 1e-12);
    }
}

fn perturbed(x: &NdArray, row: usize, width: usize, by: f64) -> NdArray {
    let mut v = x.to_vec();
    for a in &mut v[row * width..(row + 1) * width] {
        *a += by;
    }
    NdArray::new(x.shape(), v).unwrap()
}

#[test]
fn candidate_rows_are_independent() {
    for mode in [Mode::Continuous, Mode::Discrete] {
        let c = cfg(8, 2, mode);
        let p = init_params(&c, Family::Ebwm, 15).unwrap().constants();
        let batch = match mode {
            Mode::Continuous => SequenceBatch::continuous(rand_arr(&[1, 6, 6], 16)).unwrap(),
            Mode::Discrete => SequenceBatch::discrete(vec![1, 4, 2, 0, 5, 3], 1, 6, 6).unwrap(),
        };
        let w = c.candidate_dim();
        let cand = rand_arr(&[1, 5, w], 17);
        let ctx = encode_context(&p, &c, &batch).unwrap();
        let base = energy_forward(&p, &c, &ctx, &Tensor::constant(cand.clone())).unwrap();
        for i in 0..5 {
            let moved = Tensor::constant(perturbed(&cand, i, w, 0.3));
            let e = energy_forward(&p, &c, &ctx, &moved).unwrap();
            for k in 0..5 {
                let same = e.energies.value().data()[k].to_bits()
                    == base.energies.value().data()[k].to_bits();
                assert_eq!(same, k != i, "{mode:?} row {i} energy {k}");
            }
        }
    }
}

#[test]
fn context_rows_only_affect_later_energies() {
    let c = cfg(8, 2, Mode::Continuous);
    let p = init_params(&c, Family::Ebwm, 18).unwrap().constants();
    let x = rand_arr(&[1, 6, 6], 19);
    let cand = Tensor::constant(rand_arr(&[1, 5, 6], 20));
    let base = energy(
        &p,
        &c,
        &SequenceBatch::continuous(x.clone()).unwrap(),
        &cand,
    )
    .unwrap();
    for j in 0..5 {
        let b = SequenceBatch::continuous(perturbed(&x, j, 6, 0.5)).unwrap();
        let e = energy(&p, &c, &b, &cand).unwrap();
        for i in 0..5 {
            let same = e.energies.value().data()[i] == base.energies.value().data()[i];
            assert_eq!(same, i < j, "context row {j} energy {i}");
        }
    }
}

#[test]
fn energy_locality_via_autodiff() {
    let c = cfg(8, 2, Mode::Continuous);
    let p = init_params(&c, Family::Ebwm, 21).unwrap().constants();
    let batch = SequenceBatch::continuous(rand_arr(&[1, 5, 6], 22)).unwrap();
    let ctx = encode_context(&p, &c, &batch).unwrap();
    for i in 0..4 {
        let tape = Tape::new();
        let cand = tape.leaf(rand_arr(&[1, 4, 6], 23));
        let e = energy_forward(&p, &c, &ctx, &cand).unwrap();
        let ei = e.energies.narrow(1, i, 1).unwrap().sum_all().unwrap();
        let g = grad(&ei, &[&cand], false).unwrap().remove(0);
        for (k, row) in g.value().data().chunks(6).enumerate() {
            if k == i {
                assert!(row.iter().any(|&x| x != 0.0));
            } else {
                assert!(row.iter().all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn batch_permutation_permutes_energies() {
    let c = cfg(8, 2, Mode::Continuous);
    let p = init_params(&c, Family::Ebwm, 24).unwrap().constants();
    let x = rand_arr(&[3, 5, 6], 25);
    let cand = rand_arr(&[3, 4, 6], 26);
    let perm = [2usize, 0, 1];
    let permute = |a: &NdArray| {
        let n = a.numel() / 3;
        let v: Vec<f64> = perm
            .iter()
            .flat_map(|&b| a.data()[b * n..(b + 1) * n].to_vec())
            .collect();
        NdArray::new(a.shape(), v).unwrap()
    };
    let e = energy(
        &p,
        &c,
        &SequenceBatch::continuous(x.clone()).unwrap(),
        &Tensor::constant(cand.clone()),
    )
    .unwrap();
    let ep = energy(
        &p,
        &c,
        &SequenceBatch::continuous(permute(&x)).unwrap(),
        &Tensor::constant(permute(&cand)),
    )
    .unwrap();
    assert!(
        ep.energies
            .value()
            .max_abs_diff(&permute(e.energies.value()))
            < 1e-13
    );
}

#[test]
fn energy_gradient_matches_finite_differences() {
    let report = energy_gradient_check(27);
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}
