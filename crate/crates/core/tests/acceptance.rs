//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any of them fails. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test --test acceptance -- 6 9`.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctsid::control::{
    closed_loop, plan_alpha, profile_derivative, solve_control, tracking_summary, ControllerConfig, Reference,
};
use ctsid::derivkit::{reconstruct, reconstruct_orders, reconstruct_with, Tuning};
use ctsid::pipeline::{identify, IdentifyConfig, Identification};
use ctsid::plant::{etc_rhs, integrate, make_dataset, DatasetConfig, EtcParams, Trajectory, ETC_EQUILIBRIUM};
use ctsid::polyalg::{count_monomials, enumerate_basis, Polynomial};
use ctsid::sparsereg::{fit, RegressionTable, DEFAULT_EPS};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Datasets and identifications shared between criteria.
#[derive(Default)]
struct Cache {
    clean: Option<Vec<Trajectory>>,
    noisy: Option<Vec<Trajectory>>,
    runs: BTreeMap<(bool, usize, Vec<usize>), Identification>,
}

impl Cache {
    fn data(&mut self, noisy: bool) -> &[Trajectory] {
        let slot = if noisy { &mut self.noisy } else { &mut self.clean };
        slot.get_or_insert_with(|| {
            let cfg = DatasetConfig {
                nsr: if noisy { 0.03 } else { 0.0 },
                ..DatasetConfig::default()
            };
            make_dataset(&cfg).expect("dataset")
        })
    }

    fn identification(&mut self, noisy: bool, degree: usize, orders: &[usize]) -> &Identification {
        let key = (noisy, degree, orders.to_vec());
        if !self.runs.contains_key(&key) {
            let cfg = IdentifyConfig {
                degree,
                orders: orders.to_vec(),
                ..IdentifyConfig::default()
            };
            let ident = identify(self.data(noisy), &cfg).expect("identification");
            self.runs.insert(key.clone(), ident);
        }
        &self.runs[&key]
    }
}

fn monomial_counts(_: &mut Cache) -> Verdict {
    let got: Vec<u64> = [2, 4, 6].iter().map(|&d| count_monomials(11, d).unwrap()).collect();
    verdict(got == [78, 1365, 12376], format!("counts {got:?}"))
}

fn summary_line(ident: &Identification, split: &str) -> String {
    ident
        .report
        .orders
        .iter()
        .map(|(n, o)| {
            let s = if split == "test" { o.test.as_ref().unwrap() } else { &o.validation };
            format!("n{n} p95 {:.3} p99 {:.3}", s.p(95), s.p(99))
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn clean_order_selection(cache: &mut Cache) -> Verdict {
    let ident = cache.identification(false, 3, &[1, 2, 3, 4]);
    let p95 = |n: usize| ident.report.orders[&n].validation.p(95);
    let best_other = [1, 2, 4].iter().map(|&n| p95(n)).fold(f64::INFINITY, f64::min);
    let pass = p95(3) <= 0.1
        && [1, 2, 4].iter().all(|&n| p95(n) >= 1.0)
        && ident.report.selected_order == 3
        && best_other >= 10.0 * p95(3);
    verdict(
        pass,
        format!(
            "{}; selected n{}; separation {:.1}x",
            summary_line(ident, "validation"),
            ident.report.selected_order,
            best_other / p95(3)
        ),
    )
}

fn noisy_order_selection(cache: &mut Cache) -> Verdict {
    let ident = cache.identification(true, 3, &[1, 2, 3, 4]);
    let v = &ident.report.orders[&3].validation;
    let pass = v.p(95) <= 0.2 && v.p(99) <= 0.4 && ident.report.selected_order == 3;
    verdict(
        pass,
        format!("{}; selected n{}", summary_line(ident, "validation"), ident.report.selected_order),
    )
}

fn noisy_generalization(cache: &mut Cache) -> Verdict {
    let ident = cache.identification(true, 3, &[1, 2, 3, 4]);
    let t = ident.report.orders[&3].test.as_ref().unwrap();
    verdict(
        t.p(95) <= 0.15 && t.p(99) <= 0.5,
        format!("n3 test p95 {:.3} p99 {:.3}", t.p(95), t.p(99)),
    )
}

fn noisy_linear_model(cache: &mut Cache) -> Verdict {
    let ident = cache.identification(true, 1, &[3]);
    let t = ident.report.orders[&3].test.as_ref().unwrap();
    verdict(t.p(95) <= 0.3, format!("n3 d1 test p95 {:.3}", t.p(95)))
}

fn sparse_recovery(_: &mut Cache) -> Verdict {
    let basis = enumerate_basis(4, 3).unwrap();
    let mut recovered = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = sample(&mut rng, basis.len(), 5).into_vec();
        picks.sort_unstable();
        let powers: Vec<Vec<u8>> = picks.iter().map(|&i| basis.powers()[i].clone()).collect();
        let coeffs: Vec<f64> = (0..5)
            .map(|_| {
                let mag = rng.gen_range(0.5..2.0);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let truth = Polynomial::new(4, powers, coeffs).unwrap();
        let z = DMatrix::from_fn(500, 4, |_, _| rng.gen_range(-1.0..1.0));
        let labels = truth.evaluate_batch(&z).unwrap();
        let names = (0..4).map(|i| format!("z{i}")).collect();
        let table = RegressionTable::new(z, labels, names).unwrap();
        let model = fit(&table, 3, DEFAULT_EPS).unwrap().model;

        let mut got: Vec<(Vec<u8>, f64)> = model
            .powers()
            .iter()
            .cloned()
            .zip(model.coeffs().iter().copied())
            .filter(|(_, c)| *c != 0.0)
            .collect();
        got.sort_by(|a, b| a.0.cmp(&b.0));
        let mut want: Vec<(Vec<u8>, f64)> =
            truth.powers().iter().cloned().zip(truth.coeffs().iter().copied()).collect();
        want.sort_by(|a, b| a.0.cmp(&b.0));
        let exact = got.len() == want.len()
            && got
                .iter()
                .zip(&want)
                .all(|(g, w)| g.0 == w.0 && (g.1 - w.1).abs() <= 1e-6 * w.1.abs());
        if exact {
            recovered += 1;
        }
    }
    verdict(recovered >= 95, format!("{recovered}/100 exact recoveries"))
}

fn derivative_properties(_: &mut Cache) -> Verdict {
    let mut worst_poly: f64 = 0.0;
    let tau = 0.003;
    let n = 600;
    let coef = [0.4, -1.3, 2.2, -0.9];
    // value and derivatives of the cubic
    let cubic = |t: f64| {
        [
            coef[0] + coef[1] * t + coef[2] * t * t + coef[3] * t * t * t,
            coef[1] + 2.0 * coef[2] * t + 3.0 * coef[3] * t * t,
            2.0 * coef[2] + 6.0 * coef[3] * t,
            6.0 * coef[3],
        ]
    };
    let v: Vec<f64> = (0..n).map(|k| cubic(k as f64 * tau)[0]).collect();
    for est in reconstruct_orders(&v, 3, tau).unwrap() {
        for i in est.valid_indices() {
            let truth = cubic(i as f64 * tau)[est.order];
            worst_poly = worst_poly.max((est.values[i] - truth).abs() / truth.abs().max(1.0));
        }
    }

    let mut worst_lin: f64 = 0.0;
    let mut worst_scale: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..n).map(|k| (k as f64 * 0.05).sin()).collect();
    let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.5 * x - 0.7 * y).collect();
    let tuning = Tuning {
        half_window: 20,
        local_order: 5,
    };
    for order in 0..=4 {
        let ea = reconstruct_with(&a, order, tau, tuning).unwrap();
        let eb = reconstruct_with(&b, order, tau, tuning).unwrap();
        let em = reconstruct_with(&mix, order, tau, tuning).unwrap();
        let ed = reconstruct_with(&b, order, 2.0 * tau, tuning).unwrap();
        let scale = ea.values.iter().chain(&eb.values).fold(1.0f64, |m, x| m.max(x.abs()));
        for i in em.valid_indices() {
            let want = 2.5 * ea.values[i] - 0.7 * eb.values[i];
            worst_lin = worst_lin.max((em.values[i] - want).abs() / scale);
            let factor = 0.5f64.powi(order as i32);
            worst_scale = worst_scale.max((ed.values[i] - factor * eb.values[i]).abs() / eb.values[i].abs().max(1.0));
        }
    }

    let t: Vec<f64> = (0..1000).map(|k| k as f64 * tau).collect();
    let sine: Vec<f64> = t.iter().map(|t| (2.0 * t).sin()).collect();
    let est = reconstruct(&sine, 2, tau).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for i in est.valid_indices() {
        let truth = -4.0 * (2.0 * t[i]).sin();
        num += (est.values[i] - truth).powi(2);
        den += truth * truth;
    }
    let rel = (num / den).sqrt();

    let pass = worst_poly <= 1e-6 && worst_lin <= 1e-9 && worst_scale <= 1e-9 && rel <= 0.02;
    verdict(
        pass,
        format!(
            "poly err {worst_poly:.1e}, linearity {worst_lin:.1e}, scaling {worst_scale:.1e}, sine rel rms {:.2}%",
            100.0 * rel
        ),
    )
}

fn decay_sup_error(step: f64) -> f64 {
    let n = (3.0 / step).round() as usize + 1;
    let traj = integrate(|x: &[f64; 1], _| [-x[0]], [1.0], |_| 0.0, step, n, 1).unwrap();
    traj.y
        .iter()
        .enumerate()
        .map(|(k, y)| (y - (-(k as f64) * step).exp()).abs())
        .fold(0.0, f64::max)
}

fn plant_fidelity(_: &mut Cache) -> Verdict {
    let p = EtcParams::default();
    let cfg = DatasetConfig::default();
    let traj = integrate(
        |x: &[f64; 3], u| etc_rhs(x, u, &p),
        ETC_EQUILIBRIUM,
        |_| 0.0,
        cfg.tau,
        cfg.n_samples() + 1,
        cfg.substeps,
    )
    .unwrap();
    let drift = traj.y.iter().map(|y| (y - FRAC_PI_2).abs()).fold(0.0, f64::max);
    let ratio = decay_sup_error(0.1) / decay_sup_error(0.05);
    verdict(
        drift <= 1e-10 && ratio >= 12.0,
        format!("equilibrium drift {drift:.1e} over 3 s, step-halving ratio {ratio:.2}"),
    )
}

fn planner_and_controller(cache: &mut Cache) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_boundary: f64 = 0.0;
    for _ in 0..1000 {
        let xi = [rng.gen_range(-3.0..3.0), rng.gen_range(-30.0..30.0), rng.gen_range(-300.0..300.0)];
        let y_ref = rng.gen_range(-2.0..2.0);
        let sigma = rng.gen_range(0.5..10.0);
        let alpha = plan_alpha(&xi, y_ref, sigma).unwrap();
        let at_zero = [
            y_ref + profile_derivative(&alpha, sigma, 0, 0.0),
            profile_derivative(&alpha, sigma, 1, 0.0),
            profile_derivative(&alpha, sigma, 2, 0.0),
        ];
        for i in 0..3 {
            worst_boundary = worst_boundary.max((at_zero[i] - xi[i]).abs() / xi[i].abs().max(1.0));
        }
    }

    // cubic in u with state coupling, against a dense grid
    let mut worst_gap: f64 = f64::NEG_INFINITY;
    for _ in 0..5 {
        let c: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let model = Polynomial::new(
            4,
            vec![
                vec![0, 0, 0, 0],
                vec![1, 0, 0, 0],
                vec![0, 1, 0, 1],
                vec![0, 0, 0, 2],
                vec![0, 0, 0, 3],
                vec![0, 0, 1, 1],
            ],
            c,
        )
        .unwrap();
        let xi = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let jerk = rng.gen_range(-2.0..2.0);
        let u_bar = 0.15;
        let cost = |u: f64| (jerk - model.evaluate(&[xi[0], xi[1], xi[2], u]).unwrap()).abs();
        let u = solve_control(&model, &xi, jerk, u_bar).unwrap();
        let m = 1_000_000;
        let grid = (0..=m)
            .map(|i| cost(-u_bar + 2.0 * u_bar * i as f64 / m as f64))
            .fold(f64::INFINITY, f64::min);
        worst_gap = worst_gap.max(cost(u) - grid);
    }

    // step tracking with the degree-1 third-order model identified on clean data
    let model = cache.identification(false, 1, &[3]).candidates[0].model.clone();
    let step = 0.5;
    let cfg = ControllerConfig {
        duration: 2.5,
        reference: Reference::step(0.5, FRAC_PI_2, FRAC_PI_2 + step),
        ..ControllerConfig::default()
    };
    let (settle, diverged) = match closed_loop(&EtcParams::default(), &model, &cfg) {
        Ok(log) => {
            let s = tracking_summary(&log, &cfg.reference, cfg.u_bar, 0.05).unwrap();
            (s.steps[0].settling_time, false)
        }
        Err(_) => (None, true),
    };
    let settled = settle.is_some_and(|s| s <= 1.0);
    let pass = worst_boundary <= 1e-10 && worst_gap <= 1e-6 && settled && !diverged;
    verdict(
        pass,
        format!(
            "boundary residual {worst_boundary:.1e}, grid gap {worst_gap:.1e}, settling {}",
            settle.map_or("none".to_string(), |s| format!("{s:.3} s"))
        ),
    )
}

fn determinism(cache: &mut Cache) -> Verdict {
    let first = cache.identification(true, 3, &[1, 2, 3, 4]).report.to_json().unwrap();
    let fresh = make_dataset(&DatasetConfig::default()).unwrap();
    let second = identify(&fresh, &IdentifyConfig::default()).unwrap().report.to_json().unwrap();
    verdict(first == second, format!("report json {} bytes, identical: {}", first.len(), first == second))
}

type Check = fn(&mut Cache) -> Verdict;

fn main() {
    let criteria: [(u32, &str, Check); 10] = [
        (1, "monomial counts", monomial_counts),
        (2, "clean data order selection", clean_order_selection),
        (3, "noisy data order selection", noisy_order_selection),
        (4, "noisy test-set generalization", noisy_generalization),
        (5, "noisy degree-1 model on test set", noisy_linear_model),
        (6, "sparse exact recovery", sparse_recovery),
        (7, "derivative estimator properties", derivative_properties),
        (8, "plant fidelity", plant_fidelity),
        (9, "planner and closed-loop tracking", planner_and_controller),
        (10, "end-to-end determinism", determinism),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut cache = Cache::default();
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = check(&mut cache);
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {tag} {name}: {} ({:.1} s)",
            v.detail,
            start.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
