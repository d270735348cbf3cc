//! The analytic hypergradient against central finite differences of an
//! independent dense implementation of the assumed step and the uniform loss.

use debias_core::data::{Interaction, ObservationIndicator};
use debias_core::loss::LossKind;
use debias_core::meta::MetaModel;
use debias_core::model::FactorModel;
use debias_core::trainer::{base_step, hypergradient, MetaBatch, StepParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(kind: LossKind, f: f64, y: f64) -> f64 {
    match kind {
        LossKind::Squared => (f - y) * (f - y),
        LossKind::Logistic => (1.0 + (-y * f).exp()).ln(),
    }
}

fn dloss(kind: LossKind, f: f64, y: f64) -> f64 {
    match kind {
        LossKind::Squared => 2.0 * (f - y),
        LossKind::Logistic => -y / (1.0 + (y * f).exp()),
    }
}

struct Problem {
    nu: usize,
    ni: usize,
    d: usize,
    p: Vec<f64>,
    q: Vec<f64>,
    obs_rows: Vec<Interaction>,
    train: Vec<Interaction>,
    pairs: Vec<(usize, usize)>,
    uniform: Vec<Interaction>,
    n_positions: usize,
}

fn row(v: &[f64], k: usize, d: usize) -> &[f64] {
    &v[k * d..(k + 1) * d]
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weights, written out feature by feature.
fn dense_w1(phi1: &[f64], pr: &Problem, x: &Interaction) -> f64 {
    let mut z = phi1[x.user] + phi1[pr.nu + x.item] + phi1[pr.nu + pr.ni + if x.label > 0 { 1 } else { 0 }];
    if pr.n_positions > 0 {
        z += phi1[pr.nu + pr.ni + 2 + x.position.unwrap() as usize - 1];
    }
    z.exp()
}

fn observed_label(pr: &Problem, u: usize, i: usize) -> Option<i8> {
    pr.obs_rows
        .iter()
        .rev()
        .find(|x| x.user == u && x.item == i)
        .map(|x| x.label)
}

fn dense_w2_m(phi2: &[f64], phi3: &[f64], pr: &Problem, u: usize, i: usize) -> (f64, f64) {
    let label = observed_label(pr, u, i);
    let o = usize::from(label.is_some());
    let w2 = (phi2[u] + phi2[pr.nu + i] + phi2[pr.nu + pr.ni + o]).exp();
    let slot = match label {
        Some(-1) => 0,
        Some(_) => 1,
        None => 2,
    };
    let m = (phi3[slot] + phi3[3 + o]).tanh();
    (w2, m)
}

/// `L_U(θ')` with `θ'` built densely from scratch.
fn dense_uniform_loss(pr: &Problem, phi: (&[f64], &[f64], &[f64]), params: &StepParams) -> f64 {
    let (nu, ni, d) = (pr.nu, pr.ni, pr.d);
    let mut gp = vec![0.0; nu * d];
    let mut gq = vec![0.0; ni * d];
    let mut touched_u = vec![false; nu];
    let mut touched_i = vec![false; ni];
    let bt = pr.train.len() as f64;
    for x in &pr.train {
        let pu = row(&pr.p, x.user, d);
        let qi = row(&pr.q, x.item, d);
        let c = dense_w1(phi.0, pr, x) * dloss(params.loss, dotp(pu, qi), f64::from(x.label)) / bt;
        for k in 0..d {
            gp[x.user * d + k] += c * qi[k];
            gq[x.item * d + k] += c * pu[k];
        }
        touched_u[x.user] = true;
        touched_i[x.item] = true;
    }
    if params.pair_term {
        let bp = pr.pairs.len() as f64;
        for &(u, i) in &pr.pairs {
            let (w2, m) = dense_w2_m(phi.1, phi.2, pr, u, i);
            let pu = row(&pr.p, u, d);
            let qi = row(&pr.q, i, d);
            let c = w2 * dloss(params.loss, dotp(pu, qi), m) / bp;
            for k in 0..d {
                gp[u * d + k] += c * qi[k];
                gq[i * d + k] += c * pu[k];
            }
            touched_u[u] = true;
            touched_i[i] = true;
        }
    }
    let mut p2 = pr.p.clone();
    let mut q2 = pr.q.clone();
    for u in 0..nu {
        if touched_u[u] {
            for k in 0..d {
                p2[u * d + k] -= params.lr * (gp[u * d + k] + params.weight_decay * pr.p[u * d + k]);
            }
        }
    }
    for i in 0..ni {
        if touched_i[i] {
            for k in 0..d {
                q2[i * d + k] -= params.lr * (gq[i * d + k] + params.weight_decay * pr.q[i * d + k]);
            }
        }
    }
    let total: f64 = pr
        .uniform
        .iter()
        .map(|x| {
            loss(
                params.loss,
                dotp(row(&p2, x.user, d), row(&q2, x.item, d)),
                f64::from(x.label),
            )
        })
        .sum();
    total / pr.uniform.len() as f64
}

fn problem(seed: u64, list: bool) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nu, ni, d) = (4, 5, 3);
    let n_positions = if list { 3 } else { 0 };
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.random_range(-0.8..0.8)).collect() };
    let p = draw(nu * d, &mut rng);
    let q = draw(ni * d, &mut rng);
    let interaction = |rng: &mut ChaCha8Rng| {
        let x = Interaction::new(
            rng.random_range(0..nu),
            rng.random_range(0..ni),
            if rng.random_bool(0.5) { 1 } else { -1 },
        );
        if list {
            x.at_position(rng.random_range(1..=3))
        } else {
            x
        }
    };
    let obs_rows: Vec<Interaction> = (0..8).map(|_| interaction(&mut rng)).collect();
    let train = obs_rows[..6].to_vec();
    let pairs: Vec<(usize, usize)> = (0..6)
        .map(|k| {
            if k < 2 {
                (obs_rows[k].user, obs_rows[k].item)
            } else {
                (rng.random_range(0..nu), rng.random_range(0..ni))
            }
        })
        .collect();
    let uniform: Vec<Interaction> = (0..5)
        .map(|_| {
            Interaction::new(
                rng.random_range(0..nu),
                rng.random_range(0..ni),
                if rng.random_bool(0.5) { 1 } else { -1 },
            )
        })
        .collect();
    Problem {
        nu,
        ni,
        d,
        p,
        q,
        obs_rows,
        train,
        pairs,
        uniform,
        n_positions,
    }
}

fn random_meta(pr: &Problem, seed: u64) -> MetaModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut meta = MetaModel::zeros(pr.nu, pr.ni, pr.n_positions);
    for v in meta
        .phi1
        .iter_mut()
        .chain(meta.phi2.iter_mut())
        .chain(meta.phi3.iter_mut())
    {
        *v = rng.random_range(-0.5..0.5);
    }
    meta
}

fn check(seed: u64, loss_kind: LossKind, list: bool, pair_term: bool) {
    let pr = problem(seed, list);
    let meta = random_meta(&pr, seed);
    let model = FactorModel::from_factors(pr.nu, pr.ni, pr.d, pr.p.clone(), pr.q.clone()).unwrap();
    let obs = ObservationIndicator::from_interactions(&pr.obs_rows, pr.ni);
    let params = StepParams {
        lr: 0.3,
        weight_decay: 0.05,
        loss: loss_kind,
        pair_term,
    };
    let batch = MetaBatch {
        train: &pr.train,
        pairs: &pr.pairs,
        uniform: &pr.uniform,
    };
    let analytic = hypergradient(&model, &meta, &obs, &batch, &params).unwrap();

    let h = 1e-6;
    let blocks: [(&Vec<f64>, &Vec<f64>); 3] = [
        (&meta.phi1, &analytic.phi1),
        (&meta.phi2, &analytic.phi2),
        (&meta.phi3, &analytic.phi3),
    ];
    for (b, (values, grad)) in blocks.iter().enumerate() {
        for k in 0..values.len() {
            let eval = |delta: f64| {
                let mut phis = [meta.phi1.clone(), meta.phi2.clone(), meta.phi3.clone()];
                phis[b][k] += delta;
                dense_uniform_loss(&pr, (&phis[0], &phis[1], &phis[2]), &params)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let tol = 1e-6 * (1.0 + fd.abs());
            assert!(
                (fd - grad[k]).abs() <= tol,
                "seed {seed} {loss_kind:?} list={list} pair={pair_term}: block {b} slot {k}: fd {fd} analytic {}",
                grad[k]
            );
        }
    }
}

#[test]
fn dense_forward_agrees_with_library_step() {
    let pr = problem(1, false);
    let meta = random_meta(&pr, 1);
    let model = FactorModel::from_factors(pr.nu, pr.ni, pr.d, pr.p.clone(), pr.q.clone()).unwrap();
    let obs = ObservationIndicator::from_interactions(&pr.obs_rows, pr.ni);
    let params = StepParams {
        lr: 0.3,
        weight_decay: 0.05,
        loss: LossKind::Logistic,
        pair_term: true,
    };
    let next = base_step(&model, &meta, &obs, &pr.train, &pr.pairs, &params).unwrap();
    let lib: f64 = pr
        .uniform
        .iter()
        .map(|x| loss(params.loss, next.score(x.user, x.item), f64::from(x.label)))
        .sum::<f64>()
        / pr.uniform.len() as f64;
    let dense = dense_uniform_loss(&pr, (&meta.phi1, &meta.phi2, &meta.phi3), &params);
    assert!((lib - dense).abs() < 1e-13, "{lib} vs {dense}");
}

#[test]
fn hypergradient_matches_finite_differences() {
    for seed in 0..6 {
        for loss_kind in [LossKind::Squared, LossKind::Logistic] {
            check(seed, loss_kind, false, true);
            check(seed, loss_kind, false, false);
            check(seed, loss_kind, true, true);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn hypergradient_matches_finite_differences_random(seed in 100u64..100_000, logistic in any::<bool>(), list in any::<bool>()) {
        let kind = if logistic { LossKind::Logistic } else { LossKind::Squared };
        check(seed, kind, list, true);
    }
}
