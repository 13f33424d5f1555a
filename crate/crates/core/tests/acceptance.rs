//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fails.

use std::f64::consts::{E, SQRT_2};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use manifold_tune::bounds::{
    empirical_logit_perturbation, logit_perturbation_bound, loss_bound_b, peeling_depth, rademacher_bound,
    BoundParams,
};
use manifold_tune::drift::{fit_subspace, manifold_drift, off_manifold_ratio};
use manifold_tune::io::{history_csv, read_feature_matrix, write_feature_matrix, Dtype};
use manifold_tune::losses::{
    build_prototypes, consistency_img, consistency_txt, cross_entropy, grad_total, logits, objective_value,
    LogitVector, Objective, TrainBatch,
};
use manifold_tune::prompt::PromptParams;
use manifold_tune::sphere::{contraction_gap, fuse, FusionInput};
use manifold_tune::task::{generate_task, TaskSpec};
use manifold_tune::trainer::{compare_lambda, train, TrainerConfig};
use manifold_tune::{FeatureMatrix, UnitVector};

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.sample(StandardNormal)).collect()
}

fn unit_vec(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(r, d);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn unit(r: &mut ChaCha8Rng, d: usize) -> UnitVector {
    UnitVector::from_unit(unit_vec(r, d)).unwrap()
}

fn unit_rows(r: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureMatrix {
    let data: Vec<f64> = (0..n).flat_map(|_| unit_vec(r, d)).collect();
    FeatureMatrix::new_normalized(data, n, d).unwrap()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn ac1_contraction() -> Outcome {
    let mut r = rng(101);
    let dims = [2usize, 8, 64, 512];
    let pairs = 100_000;
    let mut worst_gap = f64::INFINITY;
    let mut worst_align = 0.0f64;
    for i in 0..pairs {
        let d = dims[i % dims.len()];
        let phi = unit(&mut r, d);
        let psi = loop {
            let p = unit(&mut r, d);
            if dotp(phi.as_slice(), p.as_slice()) > -0.999 {
                break p;
            }
        };
        let input = FusionInput::new(&phi, &psi).map_err(|e| e.to_string())?;
        let gap = contraction_gap(&input).map_err(|e| e.to_string())?;
        worst_gap = worst_gap.min(gap);
        let omega = fuse(&input).map_err(|e| e.to_string())?;
        let gamma = dotp(phi.as_slice(), psi.as_slice());
        let err = (dotp(omega.as_slice(), phi.as_slice()) - ((1.0 + gamma) / 2.0).sqrt()).abs();
        worst_align = worst_align.max(err);
    }
    if worst_gap < -1e-12 {
        return Err(format!("min contraction gap {worst_gap:e}"));
    }
    if worst_align > 1e-10 {
        return Err(format!("max alignment error {worst_align:e}"));
    }
    Ok(format!("min gap {worst_gap:.3e}, max alignment error {worst_align:.3e}"))
}

fn ac2_sphere_identity() -> Outcome {
    let mut r = rng(202);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(1..=32);
        let d = r.random_range(2..=64);
        let z = unit_rows(&mut r, n, d);
        let f = unit_rows(&mut r, n, d);
        let lib = consistency_img(&f, &z).map_err(|e| e.to_string())?;
        let oracle = f.rows().zip(z.rows()).map(|(a, b)| sq_dist(a, b)).sum::<f64>() / (2.0 * n as f64);
        worst = worst.max((lib - oracle).abs());
    }
    if worst > 1e-10 {
        return Err(format!("max |L_img - mean distance/2| {worst:e}"));
    }
    Ok(format!("max deviation {worst:.3e}"))
}

fn ac3_logit_perturbation() -> Outcome {
    let mut r = rng(303);
    let mut worst_slack = f64::INFINITY;
    let mut count = 0;
    for tau in [0.5, 1.0, 2.0] {
        for _ in 0..1000 {
            let n = r.random_range(1..=32);
            let c = r.random_range(1..=8);
            let d = r.random_range(2..=32);
            let z = unit_rows(&mut r, n, d);
            let descriptions: Vec<Vec<UnitVector>> = (0..c)
                .map(|_| (0..r.random_range(1..=3)).map(|_| unit(&mut r, d)).collect())
                .collect();
            let bank = build_prototypes(descriptions).map_err(|e| e.to_string())?;
            // Fused features as a small random rotation of the frozen ones.
            let step = r.random_range(0.0..1.5);
            let perturb = |r: &mut ChaCha8Rng, base: &[f64]| -> Vec<f64> {
                let v: Vec<f64> = base.iter().zip(gaussian(r, d)).map(|(b, g)| b + step * g / (d as f64).sqrt()).collect();
                let nrm = dotp(&v, &v).sqrt();
                v.into_iter().map(|x| x / nrm).collect()
            };
            let fv: Vec<f64> = z.rows().flat_map(|row| perturb(&mut r, row)).collect();
            let fv = FeatureMatrix::new_normalized(fv, n, d).unwrap();
            let ft: Vec<f64> = bank.prototypes().iter().flat_map(|w| perturb(&mut r, w.as_slice())).collect();
            let ft = FeatureMatrix::new_normalized(ft, c, d).unwrap();
            let mut oracle = 0.0;
            for (f, zr) in fv.rows().zip(z.rows()) {
                for (g, w) in ft.rows().zip(bank.prototypes()) {
                    let dl = tau * (dotp(f, g) - dotp(zr, w.as_slice()));
                    oracle += dl * dl;
                }
            }
            oracle /= n as f64;
            let lib = empirical_logit_perturbation(&fv, &z, &ft, &bank, tau).map_err(|e| e.to_string())?;
            if (lib - oracle).abs() > 1e-9 * (1.0 + oracle) {
                return Err(format!("library perturbation {lib} vs oracle {oracle}"));
            }
            let l_con = consistency_img(&fv, &z).unwrap() + consistency_txt(&ft, &bank).unwrap();
            let bound = 4.0 * tau * tau * c as f64 * l_con;
            let lib_bound = logit_perturbation_bound(tau, c, l_con).map_err(|e| e.to_string())?;
            if (lib_bound - bound).abs() > 1e-12 * (1.0 + bound) {
                return Err(format!("bound {lib_bound} vs {bound}"));
            }
            if oracle > bound + 1e-9 {
                return Err(format!("violated: {oracle} > {bound} (tau {tau}, C {c})"));
            }
            worst_slack = worst_slack.min(bound - oracle);
            count += 1;
        }
    }
    Ok(format!("{count} ensembles, min slack {worst_slack:.3e}"))
}

fn ac4_cross_entropy() -> Outcome {
    let mut r = rng(404);
    for _ in 0..1000 {
        let c = r.random_range(2..=16);
        let d = r.random_range(2..=32);
        let tau = r.random_range(0.1..10.0);
        let f = unit_vec(&mut r, d);
        let txt = unit_rows(&mut r, c, d);
        let y = r.random_range(0..c);
        let l = logits(&f, &txt, tau).map_err(|e| e.to_string())?;
        let phi = cross_entropy(&l, y).map_err(|e| e.to_string())?;
        let b = (c as f64).ln() + 2.0 * tau;
        if phi < -1e-9 || phi > b + 1e-9 {
            return Err(format!("phi {phi} outside [0, {b}]"));
        }
        let scale = r.random_range(1e-3..3.0);
        let moved: Vec<f64> = l.values().iter().map(|v| v + scale * r.sample::<f64, _>(StandardNormal)).collect();
        let dist = sq_dist(l.values(), &moved).sqrt();
        let phi2 = cross_entropy(&LogitVector::new(moved, tau).unwrap(), y).unwrap();
        if (phi - phi2).abs() > SQRT_2 * dist + 1e-9 {
            return Err(format!("lipschitz: |{phi} - {phi2}| > sqrt2 * {dist}"));
        }
    }
    Ok("1000 logit vectors".into())
}

/// Cloud with a decaying spectrum.
fn decaying_cloud(r: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureMatrix {
    let data: Vec<f64> = (0..n)
        .flat_map(|_| {
            let mut v: Vec<f64> = gaussian(r, d)
                .into_iter()
                .enumerate()
                .map(|(j, g)| g * 0.97f64.powi(j as i32))
                .collect();
            v[0] += 0.5;
            let nrm = dotp(&v, &v).sqrt();
            v.into_iter().map(|x| x / nrm).collect::<Vec<_>>()
        })
        .collect();
    FeatureMatrix::new_normalized(data, n, d).unwrap()
}

fn axis_rows(d: usize, axes: impl Iterator<Item = (usize, usize)>) -> FeatureMatrix {
    let mut data = Vec::new();
    let mut n = 0;
    for (axis, mult) in axes {
        for sign in [1.0, -1.0] {
            for _ in 0..mult {
                let mut v = vec![0.0; d];
                v[axis] = sign;
                data.extend(v);
                n += 1;
            }
        }
    }
    FeatureMatrix::new_normalized(data, n, d).unwrap()
}

fn ac5_drift_oracle() -> Outcome {
    let mut r = rng(505);
    let (n, d) = (500, 128);
    let z = decaying_cloud(&mut r, n, d);
    for k in [1, 8, 32, 64, 127] {
        let rep = manifold_drift(&z, &z, k).map_err(|e| e.to_string())?;
        if rep.delta.abs() > 1e-10 {
            return Err(format!("self drift {} at rank {k}", rep.delta));
        }
    }
    let mean: Vec<f64> = (0..d).map(|j| z.rows().map(|row| row[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| z.row(i)[j] - mean[j]);
    let sv = centered.svd(false, false).singular_values;
    let mut s2: Vec<f64> = sv.iter().map(|s| s * s).collect();
    s2.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = s2.iter().sum();
    let mut worst = 0.0f64;
    for k in [1, 8, 32, 64, 127] {
        let sub = fit_subspace(&z, k).map_err(|e| e.to_string())?;
        let ratio = off_manifold_ratio(&z, &sub).map_err(|e| e.to_string())?;
        let tail = s2[k..].iter().sum::<f64>() / total;
        worst = worst.max((ratio - tail).abs());
    }
    if worst > 1e-8 {
        return Err(format!("R(Z) vs spectral tail deviation {worst:e}"));
    }
    let inside = axis_rows(d, (0..8).map(|a| (a, 1)));
    let outside = axis_rows(d, (8..16).map(|a| (a, 1)));
    let rep = manifold_drift(&inside, &outside, 8).map_err(|e| e.to_string())?;
    if (rep.delta - 1.0).abs() > 1e-9 {
        return Err(format!("complement pair delta {}", rep.delta));
    }
    Ok(format!("tail deviation {worst:.3e}, complement delta {:.12}", rep.delta))
}

/// Per-axis multiplicities over blocks of axes `[0,8) [8,16) [16,32) [32,64) [64,128) [128,256)`.
fn block_cloud(mults: [usize; 6]) -> FeatureMatrix {
    let blocks = [(0, 8), (8, 16), (16, 32), (32, 64), (64, 128), (128, 256)];
    axis_rows(
        256,
        blocks
            .iter()
            .zip(mults)
            .flat_map(|(&(lo, hi), m)| (lo..hi).map(move |a| (a, m))),
    )
}

fn ac6_rank_sweep() -> Outcome {
    let z = block_cloud([32, 16, 8, 4, 2, 1]);
    let h = block_cloud([4, 28, 8, 4, 2, 2]);
    // Hand-computed from the multiplicities: rows total 1792 in both clouds.
    let expected = [(8, 0.25), (16, 1.0 / 7.0), (32, 1.0 / 7.0), (64, 1.0 / 7.0), (128, 1.0 / 7.0)];
    let mut prev = f64::INFINITY;
    let mut seen = Vec::new();
    for (k, want) in expected {
        let delta = manifold_drift(&z, &h, k).map_err(|e| e.to_string())?.delta;
        if (delta - want).abs() > 1e-9 {
            return Err(format!("rank {k}: delta {delta}, expected {want}"));
        }
        if delta > prev + 1e-12 {
            return Err(format!("rank {k}: delta {delta} increased from {prev}"));
        }
        prev = delta;
        seen.push(format!("{k}:{delta:.6}"));
    }
    Ok(seen.join(" "))
}

fn ac7_gradient() -> Outcome {
    let mut r = rng(707);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let lambda = [0.0, 1.0, 12.0][i % 3];
        let (n, c, d) = (4, 3, 8);
        let vis = unit_rows(&mut r, n, d);
        let txt = unit_rows(&mut r, c, d);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let bank = build_prototypes((0..c).map(|_| vec![unit(&mut r, d), unit(&mut r, d)]).collect()).unwrap();
        let objective = Objective::new(lambda, r.random_range(0.5..5.0)).unwrap();
        let params = PromptParams::random(d, 0.3, &mut r).unwrap();
        let batch = TrainBatch {
            frozen_vis: &vis,
            frozen_txt: &txt,
            labels: &labels,
        };
        let (_, g) = grad_total(&batch, &bank, &objective, &params).map_err(|e| e.to_string())?;
        let analytic = g.to_flat();
        let base = params.to_flat();
        let h = 1e-5;
        let mut numeric = Vec::with_capacity(base.len());
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += h;
            let up = objective_value(&batch, &bank, &objective, &PromptParams::from_flat(d, &p).unwrap()).unwrap();
            p[k] -= 2.0 * h;
            let down = objective_value(&batch, &bank, &objective, &PromptParams::from_flat(d, &p).unwrap()).unwrap();
            numeric.push((up.total - down.total) / (2.0 * h));
        }
        let scale = dotp(&analytic, &analytic).sqrt().max(dotp(&numeric, &numeric).sqrt());
        let rel = sq_dist(&analytic, &numeric).sqrt() / scale;
        if rel >= 1e-5 {
            return Err(format!("instance {i} (lambda {lambda}): relative error {rel:e}"));
        }
        worst = worst.max(rel);
    }
    Ok(format!("max relative error {worst:.3e}"))
}

fn ac8_lambda_ordering() -> Outcome {
    let mut lines = Vec::new();
    for seed in [1u64, 2, 3] {
        let task = generate_task(&TaskSpec::default(), seed).map_err(|e| e.to_string())?;
        let config = TrainerConfig {
            seed,
            ..TrainerConfig::default()
        };
        let rows = compare_lambda(&task, &config, &[0.0, 12.0]).map_err(|e| e.to_string())?;
        let (free, reg) = (rows[0], rows[1]);
        let summary = format!(
            "seed {seed}: delta {:.4}/{:.4} alignment {:.4}/{:.4}",
            free.delta, reg.delta, free.mean_alignment, reg.mean_alignment
        );
        if !(free.delta > reg.delta
            && reg.mean_alignment > free.mean_alignment
            && reg.delta < 0.05
            && free.delta > 0.05)
        {
            return Err(summary);
        }
        lines.push(summary);
    }
    Ok(lines.join("; "))
}

fn ac9_bounds() -> Outcome {
    let round6 = |x: f64| (x * 1e6).round() / 1e6;
    let b = loss_bound_b(2, 1.0).map_err(|e| e.to_string())?;
    if round6(b) != round6(2f64.ln() + 2.0) || format!("{b:.6}") != "2.693147" {
        return Err(format!("B(C=2, tau=1) = {b}"));
    }
    let checks = [
        (logit_perturbation_bound(1.0, 2, 0.5), 4.0),
        (logit_perturbation_bound(2.0, 3, 1.0), 48.0),
    ];
    for (got, want) in checks {
        let got = got.map_err(|e| e.to_string())?;
        if round6(got) != round6(want) {
            return Err(format!("logit perturbation bound {got} vs {want}"));
        }
    }
    // Lambda * R chosen so that the log argument is exactly e.
    let params = BoundParams {
        tau: 1.0,
        num_classes: 2,
        num_samples: 144,
        prompt_dim: 1,
        param_radius: 1.0,
        lipschitz: 2.0 * SQRT_2 / 3.0,
        confidence: 0.05,
        epsilon: 0.5,
    };
    let rad = rademacher_bound(&params).map_err(|e| e.to_string())?;
    let arg = 3.0 * E * params.lipschitz / (2.0 * (4.0 * 0.5f64).sqrt());
    if (arg - E).abs() > 1e-12 || format!("{rad:.6}") != format!("{:.6}", 2.0 * SQRT_2) {
        return Err(format!("rademacher {rad} vs 2 sqrt 2"));
    }
    for (n, h) in [(100, 7), (128, 7), (1000, 10)] {
        if peeling_depth(n) != h {
            return Err(format!("H({n}) = {}, expected {h}", peeling_depth(n)));
        }
    }
    Ok(format!("B {b:.6}, rademacher {rad:.6}"))
}

fn ac10_io() -> Outcome {
    let mut r = rng(1010);
    for i in 0..100 {
        let n = r.random_range(0..40);
        let d = r.random_range(1..40);
        let data: Vec<f64> = (0..n * d).map(|_| r.random_range(-1e6..1e6) * r.random::<f64>()).collect();
        let m = FeatureMatrix::new(data, n, d).unwrap();
        let mut buf = Vec::new();
        write_feature_matrix(&m, Dtype::F64, &mut buf).map_err(|e| e.to_string())?;
        let back = read_feature_matrix(&buf[..]).map_err(|e| e.to_string())?;
        let same_bits = m.as_slice().iter().zip(back.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !(same_bits && back.n_rows() == n && back.dim() == d) {
            return Err(format!("matrix {i} did not round-trip"));
        }
    }
    let task = generate_task(&TaskSpec::default(), 7).unwrap();
    let config = TrainerConfig {
        seed: 7,
        epochs: 20,
        ..TrainerConfig::default()
    };
    let a = history_csv(&train(&task, &config).unwrap().history);
    let b = history_csv(&train(&task, &config).unwrap().history);
    if a != b {
        return Err("history CSV differs between identical runs".into());
    }
    Ok("100 matrices, CSV stable".into())
}

type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn main() {
    let criteria: [Criterion; 10] = [
        ("AC1 contraction suite", ac1_contraction, Some(Duration::from_secs(5))),
        ("AC2 sphere identity", ac2_sphere_identity, Some(Duration::from_secs(5))),
        ("AC3 logit-perturbation bound", ac3_logit_perturbation, Some(Duration::from_secs(10))),
        ("AC4 cross-entropy bounds", ac4_cross_entropy, None),
        ("AC5 drift oracle", ac5_drift_oracle, Some(Duration::from_secs(5))),
        ("AC6 rank-sweep monotonicity", ac6_rank_sweep, None),
        ("AC7 gradient check", ac7_gradient, Some(Duration::from_secs(10))),
        ("AC8 lambda ordering", ac8_lambda_ordering, Some(Duration::from_secs(60))),
        ("AC9 bound evaluators", ac9_bounds, Some(Duration::from_secs(1))),
        ("AC10 io round-trip", ac10_io, Some(Duration::from_secs(5))),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {name} [{elapsed:.2?}] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} [{elapsed:.2?}] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
