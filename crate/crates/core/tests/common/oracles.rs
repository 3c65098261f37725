//! Independent oracles for preprocessing, factors, synapses, baselines and
//! data statistics.

use super::*;
use mtl2l::baselines::{self, BaselineConfig, BaselineKind, BaselineState};
use mtl2l::data::{synth_blobs, BatchSampler, Dataset};
use mtl2l::learner::{InitScheme, LearnerDims, MlpLearner};
use mtl2l::meta::{meta_train, MetaConfig, TaskSchedule};
use mtl2l::mtl2l::{
    compose_synapse, gen_orthonormal, mtl2l_cell, ContextMode, EigenSharing, HyperNet, Mtl2lConfig, OrthoFactorSet,
    GATES,
};
use mtl2l::neuro_opt::{
    apply_update, lstm_cell_values, optimiser_step, preprocess_grad, LstmConfig, LstmLayerParams, PreprocConfig,
};
use nalgebra::DMatrix;

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_na(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)]);
        }
    }
    Tensor::new(m.nrows(), m.ncols(), data).unwrap()
}

/// Straight from the piecewise definition with `p = 10`.
fn preprocess_oracle(g: f64) -> (f64, f64) {
    let p = 10.0_f64;
    if g.abs() >= (-p).exp() {
        (g.abs().ln() / p, if g > 0.0 { 1.0 } else { -1.0 })
    } else {
        (-1.0, p.exp() * g)
    }
}

pub fn preprocessing_table() -> Check {
    let edge = (-10.0_f64).exp();
    let cases = [
        0.0,
        -0.0,
        1.0,
        -1.0,
        1e-6,
        -1e-6,
        edge,
        -edge,
        edge * (1.0 + 1e-9),
        edge * (1.0 - 1e-9),
        -edge * (1.0 - 1e-9),
        1e-300,
        5e-324,
        1e-3,
        -2.5e-2,
        0.5,
        7.25,
        -123.456,
        1e10,
        f64::MAX,
    ];
    let t = preprocess_grad(&cases, &PreprocConfig::default()).map_err(|e| e.to_string())?;
    for (i, &g) in cases.iter().enumerate() {
        let (a, b) = preprocess_oracle(g);
        let (x, y) = (t.get(i, 0), t.get(i, 1));
        ensure!((x - a).abs() <= 1e-12 && (y - b).abs() <= 1e-12, "∇={g:e}: got ({x}, {y}), want ({a}, {b})");
        ensure!((-1.0..=f64::MAX.ln() / 10.0).contains(&x), "first channel {x} out of range");
    }
    // Hand-evaluated anchors.
    ensure!(t.row_slice(0) == [-1.0, 0.0], "zero gradient");
    ensure!(t.row_slice(2) == [0.0, 1.0], "unit gradient");
    ensure!((t.get(4, 1) - 0.022_026_465_794_806_718).abs() < 1e-15, "1e-6 scaled branch");
    ensure!((t.get(6, 0) + 1.0).abs() < 1e-15 && t.get(6, 1) == 1.0, "boundary takes the log branch");
    ensure!((t.get(9, 1) - (1.0 - 1e-9)).abs() < 1e-12, "just below the boundary scales to ≈1");
    Ok(())
}

fn orthonormal_rows(t: &Tensor, tol: f64) -> Check {
    let g = to_na(t) * to_na(t).transpose();
    let err = (g - DMatrix::<f64>::identity(t.rows(), t.rows())).abs().max();
    ensure!(err <= tol, "rows of a {:?} factor deviate from orthonormal by {err:e}", t.shape());
    Ok(())
}

pub fn factor_orthonormality() -> Check {
    for seed in 0..20u64 {
        for &(n, m) in &[(20, 20), (20, 2), (20, 1), (7, 3), (1, 1), (64, 64)] {
            let f = gen_orthonormal(seed, n, m).map_err(|e| e.to_string())?;
            ensure!(f.shape() == [m, n], "shape {:?} for ({n}, {m})", f.shape());
            orthonormal_rows(&f, 1e-10)?;
        }
    }
    let set = OrthoFactorSet::generate(3, &[2, 20], 20).map_err(|e| e.to_string())?;
    for layer in &set.layers {
        for g in layer {
            for sq in [&g.q, &g.s, &g.j] {
                orthonormal_rows(sq, 1e-10)?;
                orthonormal_rows(&sq.transpose(), 1e-10)?;
            }
            orthonormal_rows(&g.p, 1e-10)?;
        }
    }
    ensure!(gen_orthonormal(1, 3, 4).is_err(), "more rows than dimension accepted");
    Ok(())
}

pub fn square_factor_determinant() -> Check {
    for seed in 0..30u64 {
        let f = gen_orthonormal(seed, 20, 20).map_err(|e| e.to_string())?;
        let det = to_na(&f).lu().determinant();
        ensure!((det.abs() - 1.0).abs() <= 1e-10, "|det| = {} for seed {seed}", det.abs());
    }
    Ok(())
}

pub fn synapse_reconstructs_oracle_svd() -> Check {
    let mut r = rng(31);
    for &(n, m) in &[(20, 20), (20, 2), (5, 9)] {
        let a = uniform(&mut r, n, m, -1.0, 1.0);
        let svd = to_na(&a).svd(true, true);
        let u = from_na(svd.u.as_ref().unwrap());
        let v = from_na(&svd.v_t.as_ref().unwrap().transpose());
        let s: Vec<f64> = svd.singular_values.iter().copied().collect();
        let rebuilt = compose_synapse(&u, &s, &v).map_err(|e| e.to_string())?;
        let err = rebuilt.max_abs_diff(&a);
        ensure!(err <= 1e-10, "{n}×{m}: reconstruction error {err:e}");
    }
    Ok(())
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

pub fn synapse_spectral_property() -> Check {
    let hidden = 20;
    let set = OrthoFactorSet::generate(9, &[2, hidden], hidden).map_err(|e| e.to_string())?;
    let mut r = rng(32);
    for layer in &set.layers {
        for g in layer {
            for (q, p) in [(&g.q, &g.p), (&g.s, &g.j)] {
                let gamma: Vec<f64> = (0..hidden).map(|_| r.random_range(-2.0..2.0)).collect();
                let w = compose_synapse(q, &gamma, p).map_err(|e| e.to_string())?;
                let got = sorted_desc(to_na(&w).singular_values().iter().copied().collect());
                let want = sorted_desc(gamma.iter().map(|x| x.abs()).collect());
                if p.rows() == hidden {
                    for (i, (a, b)) in got.iter().zip(&want).enumerate() {
                        ensure!((a - b).abs() <= 1e-8, "σ_{i} = {a} vs |γ| {b}");
                    }
                } else {
                    // A narrow input factor keeps rank ≤ in and σ ≤ max|γ|.
                    ensure!(got.len() == p.rows(), "rank {} for {} inputs", got.len(), p.rows());
                    ensure!(got[0] <= want[0] + 1e-12, "σ_max {} above max|γ| {}", got[0], want[0]);
                }
            }
        }
    }
    Ok(())
}

/// An MTL2L stack with constant eigenvalues `γ` and the LSTM whose synapses
/// are composed from the same factors and `γ`.
fn equivalent_pair(d_ctx: usize, seed: u64) -> (mtl2l::mtl2l::Mtl2lOptimizer, mtl2l::neuro_opt::LstmOptimizer) {
    let cfg = Mtl2lConfig {
        ctx_dim: d_ctx,
        hyper_hidden: 8,
        sharing: EigenSharing::PerGate,
        context: ContextMode::Plain,
        factor_seed: seed,
        ..Mtl2lConfig::default()
    };
    let h = cfg.hidden;
    let mut m = mtl2l::mtl2l::Mtl2lOptimizer::zeros(cfg).unwrap();
    let mut r = rng(seed + 1);
    let mut layers = Vec::new();
    for l in 0..cfg.layers {
        let gf = &m.factors().layers[l].clone();
        let mut ws = Vec::new();
        let mut us = Vec::new();
        for k in 0..GATES.len() {
            for side_u in [false, true] {
                let gamma: Vec<f64> = (0..h).map(|_| r.random_range(-1.5..1.5)).collect();
                let mut net = HyperNet::zeros(d_ctx, cfg.hyper_hidden, h);
                net.b2 = Tensor::row(gamma.clone());
                m.set_hypernet(l, side_u, k, net).unwrap();
                if side_u {
                    us.push(compose_synapse(&gf[k].s, &gamma, &gf[k].j).unwrap());
                } else {
                    ws.push(compose_synapse(&gf[k].q, &gamma, &gf[k].p).unwrap());
                }
            }
        }
        let stack = |parts: Vec<Tensor>| {
            let cols = parts[0].cols();
            let data: Vec<f64> = parts.iter().flat_map(|t| t.data().to_vec()).collect();
            Tensor::new(4 * h, cols, data).unwrap()
        };
        let bias = uniform(&mut r, 1, 4 * h, -0.5, 0.5);
        *m.params_mut().get_mut(&format!("l{}.bias", l + 1)).unwrap() = bias.clone();
        layers.push(LstmLayerParams { w: stack(ws), u: stack(us), b: bias });
    }
    let w_out = uniform(&mut r, 1, h, -1.0, 1.0);
    let b_out = uniform(&mut r, 1, 1, -0.1, 0.1);
    *m.params_mut().get_mut("head.w").unwrap() = w_out.clone();
    *m.params_mut().get_mut("head.b").unwrap() = b_out.clone();
    let lstm_cfg = LstmConfig { hidden: h, layers: cfg.layers, head: cfg.head, init_seed: 0 };
    (m, mtl2l::neuro_opt::LstmOptimizer::from_layers(lstm_cfg, layers, w_out, b_out))
}

pub fn mtl2l_cell_matches_lstm_cell() -> Check {
    let (m, l) = equivalent_pair(3, 50);
    let mut r = rng(51);
    let x = uniform(&mut r, 4, 2, -1.0, 1.0);
    let h0 = uniform(&mut r, 4, 20, -0.5, 0.5);
    let c0 = uniform(&mut r, 4, 20, -0.5, 0.5);
    let (h_ref, c_ref) = lstm_cell_values(&l.layer(0), &x, &h0, &c0).map_err(|e| e.to_string())?;
    let tape = mtl2l::autodiff::Tape::new();
    let eig = |side_u: bool, k: usize| tape.constant(m.hypernet(0, side_u, k).b2);
    let ew = [0, 1, 2, 3].map(|k| eig(false, k));
    let eu = [0, 1, 2, 3].map(|k| eig(true, k));
    let bias = tape.constant(m.params().get("l1.bias").unwrap().clone());
    let [xv, hv, cv] = [&x, &h0, &c0].map(|t| tape.constant(t.clone()));
    let (h, c) = mtl2l_cell(&tape, &m.factors().layers[0], ew, eu, bias, xv, hv, cv).map_err(|e| e.to_string())?;
    let (dh, dc) = (tape.value(h).max_abs_diff(&h_ref), tape.value(c).max_abs_diff(&c_ref));
    ensure!(dh <= 1e-12 && dc <= 1e-12, "cell mismatch h {dh:e}, c {dc:e}");
    Ok(())
}

pub fn mtl2l_lstm_trajectory_equivalence() -> Check {
    let dims = LearnerDims::tiny();
    let ds = synth_blobs(52, dims.n_cls, dims.d_in, 100, 0.3).map_err(|e| e.to_string())?;
    let (m, l) = equivalent_pair(dims.d_in, 53);
    let mut theta_m = mtl2l::meta::initial_theta(dims, 54);
    let mut theta_l = theta_m.clone();
    let mut sm = m.init_state(theta_m.len());
    let mut sl = l.init_state(theta_l.len());
    let mut sampler = mtl2l::meta::batch_sampler(&ds, 32, 54);
    let mut moved = 0.0_f64;
    for step in 0..50 {
        let (x, y) = sampler.next_batch();
        let (_, gm) = mtl2l::learner::loss_and_grad(dims, &theta_m, &x, &y).map_err(|e| e.to_string())?;
        let (_, gl) = mtl2l::learner::loss_and_grad(dims, &theta_l, &x, &y).map_err(|e| e.to_string())?;
        let fm = preprocess_grad(&gm, &PreprocConfig::default()).unwrap();
        let fl = preprocess_grad(&gl, &PreprocConfig::default()).unwrap();
        let (um, nm) = optimiser_step(&m, &sm, &fm, &x).map_err(|e| e.to_string())?;
        let (ul, nl) = optimiser_step(&l, &sl, &fl, &x).map_err(|e| e.to_string())?;
        theta_m = apply_update(&theta_m, &um).unwrap();
        theta_l = apply_update(&theta_l, &ul).unwrap();
        (sm, sl) = (nm, nl);
        let gap = theta_m.iter().zip(&theta_l).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure!(gap <= 1e-10, "trajectories split at step {step}: {gap:e}");
        moved = moved.max(um.iter().map(|v| v.abs()).fold(0.0, f64::max));
    }
    ensure!(moved > 1e-3, "updates were trivially small ({moved:e})");
    Ok(())
}

fn straight_line(kind: BaselineKind, theta0: &[f64], steps: usize) -> Vec<Vec<f64>> {
    let (lr, mu, b1, b2, eps) = (0.01, 0.9, 0.9, 0.999, 1e-8);
    let mut th = theta0.to_vec();
    let mut vel = vec![0.0; th.len()];
    let mut m = vec![0.0; th.len()];
    let mut v = vec![0.0; th.len()];
    let mut out = Vec::new();
    for k in 1..=steps {
        for i in 0..th.len() {
            let g = th[i];
            match kind {
                BaselineKind::Sgd => th[i] = th[i] - lr * g,
                BaselineKind::Momentum => {
                    vel[i] = mu * vel[i] + g;
                    th[i] = th[i] - lr * vel[i];
                }
                BaselineKind::Adam => {
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let mh = m[i] / (1.0 - f64::powi(b1, k as i32));
                    let vh = v[i] / (1.0 - f64::powi(b2, k as i32));
                    th[i] = th[i] - lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        out.push(th.clone());
    }
    out
}

pub fn baseline_trajectories() -> Check {
    let theta0 = [1.0, -2.0, 0.5, 3e-3, -7.0];
    for kind in [BaselineKind::Sgd, BaselineKind::Momentum, BaselineKind::Adam] {
        let cfg = BaselineConfig::new(kind);
        let mut st = BaselineState::new(theta0.len());
        let mut th = theta0.to_vec();
        let want = straight_line(kind, &theta0, 10);
        for (k, w) in want.iter().enumerate() {
            let grad = th.clone();
            baselines::step(&cfg, &mut st, &mut th, &grad).map_err(|e| e.to_string())?;
            let err = th.iter().zip(w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure!(err <= 1e-12, "{} step {}: {err:e}", kind.name(), k + 1);
        }
    }
    // θ′ = θ − α∇ for SGD; learned updates are added, θ′ = θ + g.
    let mut th = vec![1.0];
    baselines::step(&BaselineConfig::new(BaselineKind::Sgd), &mut BaselineState::new(1), &mut th, &[1.0]).unwrap();
    ensure!(th[0] == 1.0 - 0.01, "SGD step gave {}", th[0]);
    ensure!(apply_update(&[1.0, 2.0], &[0.5, -0.25]).unwrap() == vec![1.5, 1.75], "θ + g");
    let mut th = vec![1.0];
    let mut st = BaselineState::new(1);
    baselines::step(&BaselineConfig::new(BaselineKind::Momentum), &mut st, &mut th, &[1.0]).unwrap();
    ensure!(st.velocity[0] == 1.0 && th[0] == 1.0 - 0.01, "momentum first step");
    for g in [1.0, -3.0, 1e-4, 250.0] {
        let mut th = vec![1.0];
        baselines::step(&BaselineConfig::new(BaselineKind::Adam), &mut BaselineState::new(1), &mut th, &[g]).unwrap();
        ensure!(((1.0 - th[0]).abs() - 0.01).abs() < 1e-6, "ADAM first step for ∇={g} moved {}", 1.0 - th[0]);
    }
    Ok(())
}

pub fn saturated_cell_keeps_memory() -> Check {
    let h = 20;
    let mut p = LstmLayerParams::zeros(2, h);
    let mut r = rng(60);
    for j in 0..h {
        p.b.data_mut()[j] = 20.0;
        p.b.data_mut()[h + j] = -20.0;
        p.b.data_mut()[2 * h + j] = r.random_range(-1.0..1.0);
        p.b.data_mut()[3 * h + j] = r.random_range(-1.0..1.0);
    }
    let x = uniform(&mut r, 3, 2, -1.0, 1.0);
    let c0 = uniform(&mut r, 3, h, -2.0, 2.0);
    let (_, c) = lstm_cell_values(&p, &x, &uniform(&mut r, 3, h, -1.0, 1.0), &c0).map_err(|e| e.to_string())?;
    let d = c.max_abs_diff(&c0);
    ensure!(d < 1e-8, "|c − c_prev| = {d:e}");
    Ok(())
}

pub fn context_sensitivity_of_trained_stack() -> Check {
    let dims = LearnerDims::tiny();
    let ds = synth_blobs(61, dims.n_cls, dims.d_in, 200, 0.3).map_err(|e| e.to_string())?;
    let cfg = Mtl2lConfig { ctx_dim: dims.d_in, factor_seed: 62, ..Mtl2lConfig::default() };
    let mut opt = mtl2l::mtl2l::Mtl2lOptimizer::new(cfg).unwrap();
    let meta = MetaConfig { trials: 2, steps_per_trial: 20, batch_size: 32, ..MetaConfig::default() };
    let digest = opt.factors().digest();
    let before = opt.params().flatten();
    meta_train(&mut opt, dims, &meta, &TaskSchedule::single(2), &[&ds]).map_err(|e| e.to_string())?;
    ensure!(opt.params().flatten() != before, "meta-training left φ unchanged");
    ensure!(opt.factors().digest() == digest, "factors changed during meta-training");
    let theta = mtl2l::meta::initial_theta(dims, 63);
    let mut s = mtl2l::meta::batch_sampler(&ds, 32, 63);
    let (x1, y1) = s.next_batch();
    let (x2, _) = s.next_batch();
    let (_, g) = mtl2l::learner::loss_and_grad(dims, &theta, &x1, &y1).unwrap();
    let f = preprocess_grad(&g, &PreprocConfig::default()).unwrap();
    let st = opt.init_state(theta.len());
    let (g1, _) = optimiser_step(&opt, &st, &f, &x1).map_err(|e| e.to_string())?;
    let (g1b, _) = optimiser_step(&opt, &st, &f, &x1).map_err(|e| e.to_string())?;
    let (g2, _) = optimiser_step(&opt, &st, &f, &x2).map_err(|e| e.to_string())?;
    ensure!(g1 == g1b, "optimiser step is not a pure function");
    ensure!(g1 != g2, "different context batches gave identical updates");
    let lstm = mtl2l::neuro_opt::LstmOptimizer::new(LstmConfig::default());
    let ls = lstm.init_state(theta.len());
    ensure!(
        optimiser_step(&lstm, &ls, &f, &x1).unwrap().0 == optimiser_step(&lstm, &ls, &f, &x2).unwrap().0,
        "LSTM optimiser reacted to the context"
    );
    Ok(())
}

pub fn learner_init_statistics() -> Check {
    let dims = LearnerDims::default();
    let m = MlpLearner::init(dims, 70, InitScheme::UniformFanIn);
    let n = m.w1.len();
    ensure!(n == 25_088, "w1 has {n} entries");
    let bound = 1.0 / (dims.d_in as f64).sqrt();
    let mean = m.w1.data().iter().sum::<f64>() / n as f64;
    let sigma = 2.0 * bound / 12f64.sqrt() / (n as f64).sqrt();
    ensure!(mean.abs() < 3.0 * sigma, "mean {mean:e} vs 3σ {:e}", 3.0 * sigma);
    ensure!(m.w1.data().iter().all(|v| v.abs() <= bound), "entry outside ±1/√fan_in");
    ensure!(m.b1.data().iter().chain(m.b2.data()).all(|&v| v == 0.0), "biases not zero");
    ensure!(m == MlpLearner::init(dims, 70, InitScheme::UniformFanIn), "init not deterministic");
    Ok(())
}

pub fn blobs_are_linearly_separable() -> Check {
    let (k, d) = (4, 16);
    let ds = synth_blobs(80, k, d, 250, 0.1).map_err(|e| e.to_string())?;
    // Full-batch multinomial logistic regression by plain gradient descent.
    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    let n = ds.len();
    for _ in 0..200 {
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for i in 0..n {
            let x = ds.images.row_slice(i);
            let z: Vec<f64> = (0..k).map(|c| b[c] + (0..d).map(|j| w[c * d + j] * x[j]).sum::<f64>()).collect();
            let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let delta = e[c] / s - if ds.labels[i] == c { 1.0 } else { 0.0 };
                gb[c] += delta / n as f64;
                for j in 0..d {
                    gw[c * d + j] += delta * x[j] / n as f64;
                }
            }
        }
        for (a, g) in w.iter_mut().zip(&gw) {
            *a -= 1.0 * g;
        }
        for (a, g) in b.iter_mut().zip(&gb) {
            *a -= 1.0 * g;
        }
    }
    let correct = (0..n)
        .filter(|&i| {
            let x = ds.images.row_slice(i);
            let score = |c: usize| b[c] + (0..d).map(|j| w[c * d + j] * x[j]).sum::<f64>();
            (0..k).max_by(|&a, &c| score(a).total_cmp(&score(c))).unwrap() == ds.labels[i]
        })
        .count();
    let acc = correct as f64 / n as f64;
    ensure!(acc > 0.95, "logistic regression reached {acc}");
    Ok(())
}

pub fn sampler_class_frequencies() -> Check {
    let ds: Dataset = synth_blobs(81, 10, 4, 100, 0.5).map_err(|e| e.to_string())?;
    let mut s = BatchSampler::new(&ds, 100, 82);
    let mut counts = [0usize; 10];
    for _ in 0..100 {
        let idx = s.next_indices();
        ensure!(idx.len() == 100, "batch of {}", idx.len());
        for i in idx {
            counts[ds.labels[i]] += 1;
        }
    }
    let sigma = (10_000.0 * 0.1 * 0.9_f64).sqrt();
    for (c, &n) in counts.iter().enumerate() {
        ensure!((n as f64 - 1000.0).abs() <= 3.0 * sigma, "class {c}: {n} of 10000");
    }
    let mut a = BatchSampler::new(&ds, 7, 83);
    let mut b = BatchSampler::new(&ds, 7, 83);
    for _ in 0..20 {
        ensure!(a.next_indices() == b.next_indices(), "equal seeds diverged");
    }
    Ok(())
}

pub const ALL: &[(&str, fn() -> Check)] = &[
    ("preprocessing_table", preprocessing_table),
    ("factor_orthonormality", factor_orthonormality),
    ("square_factor_determinant", square_factor_determinant),
    ("synapse_reconstructs_oracle_svd", synapse_reconstructs_oracle_svd),
    ("synapse_spectral_property", synapse_spectral_property),
    ("mtl2l_cell_matches_lstm_cell", mtl2l_cell_matches_lstm_cell),
    ("mtl2l_lstm_trajectory_equivalence", mtl2l_lstm_trajectory_equivalence),
    ("baseline_trajectories", baseline_trajectories),
    ("saturated_cell_keeps_memory", saturated_cell_keeps_memory),
    ("context_sensitivity_of_trained_stack", context_sensitivity_of_trained_stack),
    ("learner_init_statistics", learner_init_statistics),
    ("blobs_are_linearly_separable", blobs_are_linearly_separable),
    ("sampler_class_frequencies", sampler_class_frequencies),
];
