//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `GRAPHDIFF_ACCEPTANCE` selects the budget for the end-to-end criteria:
//! `desk` (default) trains briefly on one CPU, `full` uses the full training and
//! sampling budgets, `quick` skips the end-to-end run.

use std::collections::VecDeque;
use std::time::Instant;

use candle_core::{DType, Tensor};
use graphdiff_core::cli::er_baseline_graphs;
use graphdiff_core::data::{self, GraphSample};
use graphdiff_core::features;
use graphdiff_core::metrics::{self, DescriptorKind, MmdRow};
use graphdiff_core::pgsn::{tensor_to_array3, NetInput, Pgsn, PgsnConfig};
use graphdiff_core::samplers::{self, langevin_correct, ode_fixed, prior_sample, reverse_sde, NetScore, SamplerConfig, SamplerMethod};
use graphdiff_core::sde::{symmetric_noise, VpSdeSchedule};
use graphdiff_core::train::{dsm_loss, LambdaPolicy, TrainBatch, TrainConfig, Trainer};
use graphdiff_core::Result;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = std::result::Result<String, String>;

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Quick,
    Desk,
    Full,
}

struct Budget {
    train_steps: u64,
    pc_steps: usize,
    samples: usize,
    em_count: usize,
}

impl Mode {
    fn from_env() -> Self {
        match std::env::var("GRAPHDIFF_ACCEPTANCE").as_deref() {
            Ok("full") => Mode::Full,
            Ok("quick") => Mode::Quick,
            _ => Mode::Desk,
        }
    }

    fn budget(self) -> Budget {
        match self {
            Mode::Full => Budget {
                train_steps: 50_000,
                pc_steps: 1000,
                samples: 1024,
                em_count: 1024,
            },
            _ => Budget {
                train_steps: 1500,
                pc_steps: 50,
                samples: 1024,
                em_count: 64,
            },
        }
    }
}

fn max_abs(x: impl IntoIterator<Item = f64>) -> f64 {
    x.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn lower_entries(a: &Array3<f64>) -> Vec<f64> {
    let (b, n, _) = a.dim();
    let mut out = Vec::with_capacity(b * n * (n - 1) / 2);
    for k in 0..b {
        for i in 0..n {
            for j in 0..i {
                out.push(a[[k, i, j]]);
            }
        }
    }
    out
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn permute(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    let n = m.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[perm[i], perm[j]]] = m[[i, j]];
        }
    }
    out
}

fn randomize(net: &Pgsn, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<Tensor> = net
        .params()
        .vars()
        .iter()
        .map(|v| {
            let t = v.as_tensor();
            let data: Vec<f64> = (0..t.elem_count()).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let fresh = Tensor::from_vec(data, t.dims(), t.device()).unwrap();
            (fresh.to_dtype(t.dtype()).unwrap() + t).unwrap()
        })
        .collect();
    net.params().assign(&values).unwrap();
}

fn predict(net: &Pgsn, a: &Array2<f64>, bar: &Array2<f64>, t: f64, sde: &VpSdeSchedule) -> Result<Array2<f64>> {
    let n = a.nrows();
    let a3 = a.clone().insert_axis(ndarray::Axis(0));
    let b3 = bar.clone().insert_axis(ndarray::Axis(0));
    let mask = Array2::from_elem((1, n), true);
    let input = NetInput::build(&a3, &b3, &mask, &[t], net.config(), sde, net.dtype())?;
    Ok(tensor_to_array3(&net.predict_noise(&input)?)?.index_axis(ndarray::Axis(0), 0).to_owned())
}

/// Worst deviation of the network output under relabeling over random triples.
fn equivariance(net: &Pgsn, sde: &VpSdeSchedule, triples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for k in 0..triples {
        let g = if k % 2 == 0 {
            data::gen_community_small(1, &mut rng).remove(0)
        } else {
            let n = rng.random_range(2..=20);
            let p = rng.random_range(0.1..0.7);
            data::gen_er(1, n, p, &mut rng)?.remove(0)
        };
        let n = g.n();
        let t = rng.random_range(0.01..1.0);
        let noise = symmetric_noise(n, &mut rng);
        let st = sde.perturb(&g.signed(), t, &noise, &vec![true; n])?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let out = predict(net, &st.a, &st.a_bar, t, sde)?;
        let out_p = predict(net, &permute(&st.a, &perm), &permute(&st.a_bar, &perm), t, sde)?;
        worst = worst.max(max_abs((&out_p - &permute(&out, &perm)).iter().copied()));
    }
    Ok(worst)
}

fn criterion_1_init() -> Check {
    let sde = VpSdeSchedule::default();
    let net = Pgsn::new(PgsnConfig::default(), DType::F32, 0).map_err(|e| e.to_string())?;
    let plain = equivariance(&net, &sde, 100, 1).map_err(|e| e.to_string())?;
    // The output layer starts at zero; perturbing all weights makes the check non-trivial.
    randomize(&net, 2, 0.05);
    let perturbed = equivariance(&net, &sde, 100, 3).map_err(|e| e.to_string())?;
    let msg = format!("init max dev {plain:.2e}, perturbed init {perturbed:.2e}");
    if plain <= 1e-4 && perturbed <= 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_2() -> Check {
    let sde = VpSdeSchedule::default();
    // 448 nodes give 100128 lower-triangle entries, all with A0 = +1.
    let n = 448;
    let a0 = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 });
    let mask = vec![true; n];
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut worst_std, mut worst_mean, mut worst_rel, mut worst_sum) = (0f64, 0f64, 0f64, 0f64);
    for k in 1..=9 {
        let t = k as f64 / 10.0;
        let m = sde.marginal_coeffs(t).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((m.alpha * m.alpha + m.sigma * m.sigma - 1.0).abs());
        let st = sde.perturb(&a0, t, &symmetric_noise(n, &mut rng), &mask).map_err(|e| e.to_string())?;
        let x = lower_entries(&st.a.insert_axis(ndarray::Axis(0)));
        let (mean, var) = moments(&x);
        worst_std = worst_std.max((var.sqrt() - m.sigma).abs() / m.sigma);
        // Absolute on the unit data scale: at t = 0.9 alpha is ~0.017, about five standard errors.
        worst_mean = worst_mean.max((mean - m.alpha).abs());
        worst_rel = worst_rel.max((mean - m.alpha).abs() / m.alpha);
    }
    let msg = format!("std rel err {worst_std:.2e}, mean abs err {worst_mean:.2e} (rel {worst_rel:.2e}), |a^2+s^2-1| {worst_sum:.1e}");
    if worst_std <= 0.01 && worst_mean <= 0.01 && worst_sum <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn bfs(g: &GraphSample, src: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; g.n()];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for v in 0..g.n() {
            if g.has_edge(u, v) && dist[v].is_none() {
                dist[v] = Some(dist[u].unwrap() + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

fn criterion_3() -> Check {
    let r = 32;
    let mut pairs = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=30);
        let p = [0.05, 0.1, 0.3, 0.5][seed as usize % 4];
        let g = data::gen_er(1, n, p, &mut rng).map_err(|e| e.to_string())?.remove(0);
        let f = features::extract(&g.binary(), r);
        for i in 0..n {
            let dist = bfs(&g, i);
            for j in 0..n {
                let want = match dist[j] {
                    Some(d) if (1..=r).contains(&d) => d,
                    _ => r + 1,
                };
                if f.spd.classes[[i, j]] != want {
                    return Err(format!("graph {seed}, pair ({i}, {j}): {} vs {want}", f.spd.classes[[i, j]]));
                }
                pairs += 1;
            }
        }
    }
    Ok(format!("{pairs} pairs on 200 graphs agree"))
}

const MU: f64 = 0.5;
const S0: f64 = 0.3;
const T_END: f64 = 1e-5;

fn gaussian_score(sde: VpSdeSchedule) -> impl Fn(&Array3<f64>, &Array3<f64>, &Array2<bool>, f64) -> Result<Array3<f64>> {
    move |a, _, _, t| {
        let m = sde.marginal_coeffs(t)?;
        let var = m.alpha * m.alpha * S0 * S0 + m.sigma * m.sigma;
        Ok(a.mapv(|x| -(x - m.alpha * MU) / var))
    }
}

fn criterion_4() -> Check {
    let sde = VpSdeSchedule::default();
    let score = gaussian_score(sde);
    let mask = Array2::from_elem((1, 142), true);
    let m_end = sde.marginal_coeffs(T_END).map_err(|e| e.to_string())?;
    let (want_mean, want_var) = (m_end.alpha * MU, (m_end.alpha * S0).powi(2) + m_end.sigma.powi(2));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let em = reverse_sde(&score, prior_sample(&mask, &mut rng), &mask, 1000, 0, 0.16, T_END, &sde, &mut rng)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ode = ode_fixed(&score, prior_sample(&mask, &mut rng), &mask, (1.0 - T_END) / 1000.0, T_END, &sde)
        .map_err(|e| e.to_string())?;
    let (xe, xo) = (lower_entries(&em.a), lower_entries(&ode.a));
    let n = xe.len() as f64;
    let (me, ve) = moments(&xe);
    let (mo, vo) = moments(&xo);
    let mut ok = true;
    for (m, v) in [(me, ve), (mo, vo)] {
        ok &= (m - want_mean).abs() <= 0.05 * want_mean && (v - want_var).abs() <= 0.10 * want_var;
    }
    let se_mean = (ve / n + vo / n).sqrt();
    let se_var = ((2.0 * ve * ve + 2.0 * vo * vo) / (n - 1.0)).sqrt();
    ok &= (me - mo).abs() <= 3.0 * se_mean && (ve - vo).abs() <= 3.0 * se_var;
    let msg = format!(
        "{} trajectories; EM mean {me:.4} var {ve:.4}, RK4 mean {mo:.4} var {vo:.4}, exact {want_mean:.4} {want_var:.4}; gaps {:.1} / {:.1} SE",
        xe.len(),
        (me - mo).abs() / se_mean,
        (ve - vo).abs() / se_var
    );
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_5() -> Check {
    let sde = VpSdeSchedule::default();
    let score = gaussian_score(sde);
    let mask = Array2::from_elem((1, 142), true);
    let t = 0.3;
    let m = sde.marginal_coeffs(t).map_err(|e| e.to_string())?;
    let (mean, var) = (m.alpha * MU, (m.alpha * S0).powi(2) + m.sigma.powi(2));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut a = prior_sample(&mask, &mut rng).mapv(|v| mean + var.sqrt() * v);
    for i in 0..142 {
        a[[0, i, i]] = 0.0;
    }
    let (m0, v0) = moments(&lower_entries(&a));
    langevin_correct(&mut a, &mask, t, &score, 0.1, 50, &mut rng).map_err(|e| e.to_string())?;
    let (m1, v1) = moments(&lower_entries(&a));
    let (dm, dv) = ((m1 - m0).abs() / m0.abs(), (v1 - v0).abs() / v0);
    let msg = format!("snr 0.1, 50 steps: mean drift {:.2}%, variance drift {:.2}%", 100.0 * dm, 100.0 * dv);
    if dm < 0.02 && dv < 0.02 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn brute_mmd(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum();
        (-d / (2.0 * sigma * sigma)).exp()
    };
    let mean = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        let mut s = 0.0;
        for a in p {
            for b in q {
                s += k(a, b);
            }
        }
        s / (p.len() * q.len()) as f64
    };
    mean(x, x) + mean(y, y) - 2.0 * mean(x, y)
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let graphs = data::gen_community_small(20, &mut rng);
    let mut same = 0f64;
    for kind in DescriptorKind::ALL {
        same = same.max(metrics::descriptor_mmd(kind, &graphs, &graphs).map_err(|e| e.to_string())?.0.abs());
    }
    let mut brute = 0f64;
    for trial in 0..20 {
        let dim = 1 + trial % 7;
        let mut hist = || -> Vec<Vec<f64>> { (0..20).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect() };
        let (x, y) = (hist(), hist());
        let (max, at) = metrics::mmd_max_over_sigma(&x, &y).map_err(|e| e.to_string())?;
        brute = brute.max((max - brute_mmd(&x, &y, at)).abs());
        for s in metrics::sigma_grid() {
            let (got, _) = metrics::mmd_max_over_sigmas(&x, &y, &[s]).map_err(|e| e.to_string())?;
            brute = brute.max((got - brute_mmd(&x, &y, s)).abs());
        }
    }
    let (x, y, sigma) = (vec![0.2, 0.8], vec![0.6, 0.4], 0.7);
    let k = metrics::rbf_kernel(&x, &y, sigma).map_err(|e| e.to_string())?;
    let (hand, _) = metrics::mmd_max_over_sigmas(&[x], &[y], &[sigma]).map_err(|e| e.to_string())?;
    let exact = hand == 2.0 - 2.0 * k;
    let msg = format!("identical {same:.1e}, brute-force gap {brute:.1e}, singleton case exact: {exact}");
    if same <= 1e-12 && brute <= 1e-9 && exact {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_7() -> Check {
    let sde = VpSdeSchedule::default();
    let cfg = PgsnConfig {
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 2,
        rw_steps: 6,
        max_nodes: 5,
        time_embed_dim: 16,
        ..Default::default()
    };
    let e = |e: graphdiff_core::Error| e.to_string();
    let net = Pgsn::new(cfg, DType::F64, 1).map_err(e)?;
    randomize(&net, 2, 0.1);
    let g = GraphSample::from_edges(5, &[(0, 1), (1, 2), (2, 3), (0, 3), (3, 4)]).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = TrainBatch::perturb(&[&g, &g], &[0.3, 0.7], &sde, &mut rng).map_err(e)?;
    let loss = dsm_loss(&net, &batch, &sde, LambdaPolicy::SigmaSquared).map_err(e)?;
    let grads = loss.backward().map_err(|x| x.to_string())?;
    let base = net.params().snapshot().map_err(e)?;
    let mut worst = 0f64;
    for trial in 0..5u64 {
        let mut drng = ChaCha8Rng::seed_from_u64(100 + trial);
        let dirs: Vec<Tensor> = base
            .iter()
            .map(|t| {
                let v: Vec<f64> = (0..t.elem_count()).map(|_| drng.sample(StandardNormal)).collect();
                Tensor::from_vec(v, t.dims(), t.device()).unwrap()
            })
            .collect();
        let mut analytic = 0.0;
        for (var, d) in net.params().vars().iter().zip(&dirs) {
            if let Some(gv) = grads.get(var.as_tensor()) {
                analytic += gv.mul(d).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            }
        }
        let h = 1e-5;
        let eval = |sign: f64| {
            let shifted: Vec<Tensor> = base
                .iter()
                .zip(&dirs)
                .map(|(b, d)| (b + d.affine(sign * h, 0.0).unwrap()).unwrap())
                .collect();
            net.params().assign(&shifted).unwrap();
            dsm_loss(&net, &batch, &sde, LambdaPolicy::SigmaSquared).unwrap().to_scalar::<f64>().unwrap()
        };
        let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * h);
        net.params().assign(&base).map_err(e)?;
        worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1e-12));
    }
    let msg = format!("5 directions, worst relative error {worst:.2e}");
    if worst <= 1e-3 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct Trained {
    net: Pgsn,
    sde: VpSdeSchedule,
    split: data::DatasetSplit,
}

fn report_row(graphs: &[GraphSample], test: &[GraphSample]) -> Result<MmdRow> {
    MmdRow::compare(graphs, test)
}

fn criterion_8(budget: &Budget, mode: Mode) -> std::result::Result<(String, Trained), String> {
    let e = |e: graphdiff_core::Error| e.to_string();
    let sde = VpSdeSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let graphs = data::gen_community_small(100, &mut rng);
    let split = data::make_split(&graphs, 0).map_err(e)?;
    let train = TrainConfig {
        learning_rate: 1e-3,
        ema_momentum: 0.999,
        batch_size: 16,
        total_steps: budget.train_steps,
        log_interval: 0,
        val_interval: 0,
        ..Default::default()
    };
    let start = Instant::now();
    let mut trainer = Trainer::new(PgsnConfig::default(), train, sde).map_err(e)?;
    let log = trainer.fit(&split, None, &mut std::io::sink()).map_err(e)?;
    let train_secs = start.elapsed().as_secs_f64();
    let val = log.last().and_then(|r| r.val_loss).unwrap_or(f64::NAN);
    eprintln!("  trained {} steps in {train_secs:.0}s, validation loss {val:.4}", budget.train_steps);

    let net = trainer.ema_network().map_err(e)?;
    let cfg = SamplerConfig {
        method: SamplerMethod::Pc,
        num_steps: budget.pc_steps,
        corrector_steps_per_iter: 1,
        seed: 8,
        ..Default::default()
    };
    let score = NetScore { net: &net, sde };
    let (samples, manifest) = samplers::generate(&score, &split.node_counts, budget.samples, &cfg, &sde).map_err(e)?;
    let row = report_row(&samples, &split.test).map_err(e)?;
    let er = er_baseline_graphs(&split.train, budget.samples, 9).map_err(e)?;
    let er_avg = report_row(&er, &split.test).map_err(e)?.average();
    let avg = row.average();
    // The literal gate needs the full budget; one CPU gets the "below the ER baseline" relaxation.
    let pass = match mode {
        Mode::Full => avg <= 0.15,
        _ => avg < 0.213,
    };
    let msg = format!(
        "{} steps, PC {} steps x{} (NFE {}), avg MMD {avg:.3} (deg {:.3} clus {:.3} spec {:.3}); gate {}; computed ER {er_avg:.3}; sampling {:.0}s",
        budget.train_steps,
        budget.pc_steps,
        budget.samples,
        manifest.nfe,
        row.degree,
        row.clustering,
        row.spectrum,
        if mode == Mode::Full { "<= 0.15" } else { "< 0.213" },
        manifest.wall_time_total
    );
    let trained = Trained { net, sde, split };
    if pass {
        Ok((msg, trained))
    } else {
        Err(msg)
    }
}

fn criterion_1_trained(t: &Trained) -> Check {
    let dev = equivariance(&t.net, &t.sde, 100, 11).map_err(|e| e.to_string())?;
    let msg = format!("trained max dev {dev:.2e}");
    if dev <= 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_9(t: &Trained, budget: &Budget) -> Check {
    let e = |e: graphdiff_core::Error| e.to_string();
    let score = NetScore { net: &t.net, sde: t.sde };
    let ode_cfg = SamplerConfig {
        method: SamplerMethod::OdeFixed,
        ode_step_size: 0.18,
        seed: 10,
        ..Default::default()
    };
    let start = Instant::now();
    let (ode, manifest) = samplers::generate(&score, &t.split.node_counts, budget.samples, &ode_cfg, &t.sde).map_err(e)?;
    let ode_secs = start.elapsed().as_secs_f64();
    let em_cfg = SamplerConfig {
        method: SamplerMethod::Em,
        num_steps: 1000,
        seed: 11,
        ..Default::default()
    };
    let (em, em_manifest) = samplers::generate(&score, &t.split.node_counts, budget.em_count, &em_cfg, &t.sde).map_err(e)?;
    // Equal sample sizes: the biased estimator grows as the generated set shrinks.
    let ode_avg = report_row(&ode[..budget.em_count], &t.split.test).map_err(e)?.average();
    let ode_full = report_row(&ode, &t.split.test).map_err(e)?.average();
    let em_avg = report_row(&em, &t.split.test).map_err(e)?.average();
    let msg = format!(
        "ODE NFE {}, {} graphs in {ode_secs:.0}s, avg {ode_full:.3}; on {} graphs ODE {ode_avg:.3} vs EM (NFE {}) {em_avg:.3}",
        manifest.nfe, budget.samples, budget.em_count, em_manifest.nfe
    );
    if manifest.nfe == 24 && ode_avg <= 2.0 * em_avg && ode_secs < 600.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn timed(f: impl FnOnce() -> Check) -> (Check, f64) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed().as_secs_f64())
}

fn line(id: u32, name: &str, r: &Check, secs: f64, limit: Option<f64>) -> bool {
    let over = limit.is_some_and(|l| secs >= l);
    let (status, detail) = match r {
        Ok(m) if !over => ("PASS", m.clone()),
        Ok(m) => ("FAIL", format!("{m}; runtime over {}s", limit.unwrap())),
        Err(m) => ("FAIL", m.clone()),
    };
    println!("criterion {id} {name}: {status} ({detail}) [{secs:.1}s]");
    status == "PASS"
}

fn main() {
    let mode = Mode::from_env();
    let budget = mode.budget();
    let mut all = true;

    let (init, init_secs) = timed(criterion_1_init);
    let simple: [(u32, &str, fn() -> Check, Option<f64>); 6] = [
        (2, "perturbation kernel moments", criterion_2, Some(60.0)),
        (3, "SPD matches BFS", criterion_3, Some(60.0)),
        (4, "Gaussian sampler oracle", criterion_4, Some(300.0)),
        (5, "Langevin stationarity", criterion_5, Some(60.0)),
        (6, "MMD correctness", criterion_6, None),
        (7, "DSM gradient check", criterion_7, None),
    ];
    let mut lines = Vec::new();
    for (id, name, f, limit) in simple {
        eprintln!("running criterion {id}");
        let (r, secs) = timed(f);
        lines.push((id, name, r, secs, limit));
    }

    if mode == Mode::Quick {
        all &= line(1, "equivariance", &init, init_secs, Some(120.0));
        for (id, name, r, secs, limit) in &lines {
            all &= line(*id, name, r, *secs, *limit);
        }
        println!("criterion 8 end-to-end: SKIP (quick mode)");
        println!("criterion 9 efficient sampling: SKIP (quick mode)");
    } else {
        eprintln!("running criterion 8 ({} training steps)", budget.train_steps);
        let (e2e, e2e_secs) = {
            let start = Instant::now();
            let r = criterion_8(&budget, mode);
            (r, start.elapsed().as_secs_f64())
        };
        let (c8, trained) = match e2e {
            Ok((m, t)) => (Ok(m), Some(t)),
            Err(m) => (Err(m), None),
        };
        let (c1, c1_secs, c9, c9_secs) = match &trained {
            Some(t) => {
                eprintln!("running criterion 9");
                let (r1, s1) = timed(|| criterion_1_trained(t));
                let (r9, s9) = timed(|| criterion_9(t, &budget));
                (r1, s1, r9, s9)
            }
            None => (
                Err("no trained network".to_string()),
                0.0,
                Err("no trained network".to_string()),
                0.0,
            ),
        };
        let c1 = match (&init, &c1) {
            (Ok(a), Ok(b)) => Ok(format!("{a}, {b}")),
            (Err(a), _) | (_, Err(a)) => Err(a.clone()),
        };
        all &= line(1, "equivariance", &c1, init_secs + c1_secs, Some(120.0));
        for (id, name, r, secs, limit) in &lines {
            all &= line(*id, name, r, *secs, *limit);
        }
        all &= line(8, "end-to-end", &c8, e2e_secs, None);
        all &= line(9, "efficient sampling", &c9, c9_secs, None);
    }
    if !all {
        std::process::exit(1);
    }
}
