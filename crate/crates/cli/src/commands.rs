//! The six experiment commands. Each resolves its config, runs its grid
//! through the worker pool, and writes manifest.json, results.csv, and
//! report.json (plus optional SVG plots) into the output directory.

use crate::config::{fully_noised, ExperimentConfig, ScheduleConfig};
use crate::plot::{line_plot, Series};
use crate::pool::run_cells;
use crate::report::RunDir;
use anyhow::{anyhow, Result};
use serde::Serialize;
use serde_json::json;
use taglab_core::guidance::{sample_multicond, MulticondStrengths, MulticondVariant};
use taglab_core::linalg::Matrix;
use taglab_core::metrics::{
    mann_whitney_one_sided, mixture_nll, sliced_w1, spearman, time_gap, RunSummary,
};
use taglab_core::net::{train_score_model, train_time_predictor, TrainConfig};
use taglab_core::sampler::{
    ddim_step_indices, estimate_escape_time, full_step_indices, run_reverse, InitDist,
    LangevinKind, ReverseConfig, SamplerKind, ScoreSource, TagConfig, TlsSource, TrajectorySet,
};
use taglab_core::{MarginalFamily, NoiseSchedule, Rng};

fn summary(cfg: &ExperimentConfig, experiment: &str, label: String) -> RunSummary {
    RunSummary {
        experiment: experiment.into(),
        label,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        time_gap_mean: None,
        sliced_w1: None,
        nll: None,
        time_gap_profile: None,
        extra: None,
    }
}

/// Identity and property checks; exit nonzero on any failure.
pub fn cmd_verify(cfg: &ExperimentConfig, dir: &RunDir) -> Result<bool> {
    dir.write_manifest("verify", cfg)?;
    let vconfig = taglab_core::verify::VerifyConfig {
        seed: cfg.seed,
        gamma_bias: cfg.corrupt_gamma,
        ..Default::default()
    };
    let reports = taglab_core::verify::run_all(&vconfig)?;
    let all_passed = reports.iter().all(|r| r.passed);
    #[derive(Serialize)]
    struct VerifyReport<'a> {
        passed: bool,
        seed: u64,
        gamma_bias: f64,
        checks: &'a [taglab_core::verify::CheckReport],
    }
    dir.write_json(
        "report.json",
        &VerifyReport { passed: all_passed, seed: cfg.seed, gamma_bias: cfg.corrupt_gamma, checks: &reports },
    )?;
    for r in &reports {
        println!(
            "{} {}: max_abs = {:.3e}, max_rel = {:.3e} ({} instances)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_abs_error,
            r.max_rel_error,
            r.instances
        );
    }
    Ok(all_passed)
}

struct ToyModels {
    score: taglab_core::Mlp,
    predictor: taglab_core::Mlp,
    score_loss: Vec<f64>,
    predictor_loss: Vec<f64>,
}

fn train_toy_models(
    cfg: &ExperimentConfig,
    schedule: &NoiseSchedule,
) -> taglab_core::Result<ToyModels> {
    let data = Matrix::from_vec(
        cfg.n_train,
        cfg.mixture.dim(),
        cfg.mixture.sample(cfg.n_train, &mut Rng::from_stream(cfg.seed, &[0x44415441])),
    );
    let score_cfg = TrainConfig {
        epochs: cfg.score_model.epochs,
        learning_rate: cfg.score_model.learning_rate,
        ..Default::default()
    };
    eprintln!(
        "training score model ({:?} hidden, {} epochs, {} samples)…",
        cfg.score_model.hidden, cfg.score_model.epochs, cfg.n_train
    );
    let score = train_score_model(&data, schedule, &cfg.score_model.hidden, &score_cfg, cfg.seed)?;
    let pred_cfg = TrainConfig {
        epochs: cfg.time_predictor.epochs,
        learning_rate: cfg.time_predictor.learning_rate,
        ..Default::default()
    };
    eprintln!(
        "training time predictor ({:?} hidden, {} epochs)…",
        cfg.time_predictor.hidden, cfg.time_predictor.epochs
    );
    let predictor =
        train_time_predictor(&data, schedule, &cfg.time_predictor.hidden, &pred_cfg, cfg.seed + 1)?;
    Ok(ToyModels {
        score: score.mlp,
        predictor: predictor.mlp,
        score_loss: score.loss_history,
        predictor_loss: predictor.loss_history,
    })
}

/// Two-well benchmark: train the models, run drift-corrupted sampling with
/// and without guidance (trained-predictor and analytic variants), report
/// sliced W1 and time gap per strength.
pub fn cmd_toy(cfg: &ExperimentConfig, dir: &RunDir) -> Result<bool> {
    dir.write_manifest("toy", cfg)?;
    let (_, schedule) = cfg.resolve_schedule(ScheduleConfig::default())?;
    let models = train_toy_models(cfg, &schedule)?;

    let gm = &cfg.mixture;
    let reference = Matrix::from_vec(
        cfg.n_samples,
        gm.dim(),
        gm.sample(cfg.n_samples, &mut Rng::from_stream(cfg.seed, &[0x524546])),
    );
    let score_src = ScoreSource::learned(&models.score, &schedule);
    let tls_pred = TlsSource::predictor(&models.predictor);
    let tls_exact = TlsSource::analytic(gm, &schedule)?;
    let drift_scale = cfg.drift_scale;
    let drift = move |x: &[f64], _: usize| x.iter().map(|v| drift_scale * v).collect::<Vec<f64>>();

    // Grid: the no-guidance run plus every (variant, ω > 0) cell.
    let mut cells: Vec<(String, &TlsSource, f64)> = vec![("no_tag".into(), &tls_exact, 0.0)];
    for &omega0 in &cfg.omega_grid {
        if omega0 > 0.0 {
            cells.push((format!("tag_predictor_w{omega0}"), &tls_pred, omega0));
            cells.push((format!("tag_analytic_w{omega0}"), &tls_exact, omega0));
        }
    }

    let results = run_cells(cfg.workers, cells, |(label, tls, omega0)| {
        let set = run_reverse(
            &score_src,
            &ReverseConfig {
                kind: cfg.sampler,
                steps: full_step_indices(schedule.num_steps),
                n_trajectories: cfg.n_samples,
                seed: cfg.seed,
                corruption_sigma: 0.0,
                tag: Some(TagConfig { tls, omega_kind: cfg.omega_kind, omega0: *omega0 }),
                drift: Some(&drift),
                record_predicted_times: false,
            },
        )?;
        let terminal = set.terminal_states();
        let w1 = sliced_w1(&terminal, &reference, cfg.w1_projections, cfg.seed)?;
        let tg = time_gap(&set, &tls_pred)?;
        let nll = mixture_nll(gm, &terminal)?;
        Ok::<_, taglab_core::Error>((label.clone(), set, w1, tg, nll))
    });

    let mut rows = Vec::new();
    let mut report_runs = Vec::new();
    for cell in results {
        let (label, set, w1, tg, nll) = cell?;
        println!("{label}: W1 = {w1:.3}, time gap = {tg:.2}, NLL = {nll:.2}");
        dir.write_trajectories(&format!("trajectories_{label}.csv"), &set, cfg.dump_trajectories)?;
        let mut row = summary(cfg, "toy", label.clone());
        row.sliced_w1 = Some(w1);
        row.time_gap_mean = Some(tg);
        row.nll = Some(nll);
        rows.push(row);
        report_runs.push(json!({"label": label, "sliced_w1": w1, "time_gap": tg, "nll": nll}));
    }
    dir.write_results_csv(&rows)?;

    let no_tag_w1 = rows.iter().find(|r| r.label == "no_tag").and_then(|r| r.sliced_w1);
    let best = |prefix: &str| {
        rows.iter()
            .filter(|r| r.label.starts_with(prefix))
            .filter_map(|r| r.sliced_w1.map(|w| (r.label.clone(), w)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    };
    let best_pred = best("tag_predictor");
    let best_exact = best("tag_analytic");
    dir.write_json(
        "report.json",
        &json!({
            "runs": report_runs,
            "no_tag_w1": no_tag_w1,
            "best_tag_predictor": best_pred.as_ref().map(|(l, w)| json!({"label": l, "w1": w})),
            "best_tag_analytic": best_exact.as_ref().map(|(l, w)| json!({"label": l, "w1": w})),
            "score_final_loss": models.score_loss.last(),
            "predictor_final_loss": models.predictor_loss.last(),
        }),
    )?;

    if cfg.plots {
        let pick = |prefix: &str| {
            let mut pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.label.starts_with(prefix))
                .map(|r| {
                    let w = r.label.rsplit('w').next().unwrap().parse::<f64>().unwrap_or(0.0);
                    (w, r.sliced_w1.unwrap_or(f64::NAN))
                })
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            pts
        };
        line_plot(
            &dir.dir.join("w1_vs_omega.svg"),
            "terminal sliced W1 vs guidance strength",
            "omega0",
            "sliced W1",
            &[
                Series { label: "trained predictor", points: pick("tag_predictor") },
                Series { label: "analytic posterior", points: pick("tag_analytic") },
            ],
        )?;
    }
    Ok(true)
}

/// σ × ω corruption grid with time-gap trends.
pub fn cmd_corrupted(cfg: &ExperimentConfig, dir: &RunDir) -> Result<bool> {
    dir.write_manifest("corrupted", cfg)?;
    let (_, schedule) = cfg.resolve_schedule(fully_noised())?;
    let gm = &cfg.mixture;
    let score_src = ScoreSource::analytic(gm, &schedule)?;
    let tls = TlsSource::analytic(gm, &schedule)?;
    let reference = Matrix::from_vec(
        cfg.n_samples,
        gm.dim(),
        gm.sample(cfg.n_samples, &mut Rng::from_stream(cfg.seed, &[0x524546])),
    );

    let mut cells = Vec::new();
    for &sigma in &cfg.sigma_grid {
        for &omega0 in &cfg.omega_grid {
            cells.push((sigma, omega0));
        }
    }
    let results = run_cells(cfg.workers, cells, |&(sigma, omega0)| {
        let set = run_reverse(
            &score_src,
            &ReverseConfig {
                kind: SamplerKind::Ddpm,
                steps: full_step_indices(schedule.num_steps),
                n_trajectories: cfg.n_samples,
                seed: cfg.seed,
                corruption_sigma: sigma,
                tag: Some(TagConfig { tls: &tls, omega_kind: cfg.omega_kind, omega0 }),
                drift: None,
                record_predicted_times: false,
            },
        )?;
        let tg = time_gap(&set, &tls)?;
        let w1 = sliced_w1(&set.terminal_states(), &reference, cfg.w1_projections, cfg.seed)?;
        Ok::<_, taglab_core::Error>((sigma, omega0, tg, w1))
    });

    let mut rows = Vec::new();
    let mut by_sigma: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
    for cell in results {
        let (sigma, omega0, tg, w1) = cell?;
        println!("sigma={sigma} omega0={omega0}: time gap = {tg:.2}, W1 = {w1:.3}");
        let mut row = summary(cfg, "corrupted", format!("sigma{sigma}_w{omega0}"));
        row.time_gap_mean = Some(tg);
        row.sliced_w1 = Some(w1);
        rows.push(row);
        match by_sigma.iter_mut().find(|(s, _)| *s == sigma) {
            Some((_, v)) => v.push((omega0, tg)),
            None => by_sigma.push((sigma, vec![(omega0, tg)])),
        }
    }
    dir.write_results_csv(&rows)?;

    // Trend per σ: gap at the best ω strictly below ω = 0, and negative rank
    // correlation over the pre-saturation prefix (up to the argmin).
    let mut trends = Vec::new();
    let mut all_ok = true;
    for (sigma, mut curve) in by_sigma.clone() {
        curve.sort_by(|a, b| a.0.total_cmp(&b.0));
        let zero_gap = curve.iter().find(|(w, _)| *w == 0.0).map(|(_, g)| *g);
        let (argmin, min_gap) =
            curve.iter().enumerate().min_by(|a, b| a.1 .1.total_cmp(&b.1 .1)).map(|(i, &(_, g))| (i, g)).unwrap();
        let prefix = &curve[..=argmin];
        let rho = if prefix.len() >= 3 {
            spearman(
                &prefix.iter().map(|(w, _)| *w).collect::<Vec<_>>(),
                &prefix.iter().map(|(_, g)| *g).collect::<Vec<_>>(),
            )
            .ok()
        } else {
            None
        };
        let improved = zero_gap.map(|z| min_gap < z).unwrap_or(false);
        let negative = rho.map(|r| r < 0.0).unwrap_or(false);
        all_ok &= improved && negative;
        trends.push(json!({
            "sigma": sigma,
            "time_gap_at_zero": zero_gap,
            "best_time_gap": min_gap,
            "pre_saturation_spearman": rho,
            "improved": improved,
            "negative_correlation": negative,
        }));
    }
    dir.write_json("report.json", &json!({"trends": trends, "all_trends_hold": all_ok}))?;

    if cfg.plots {
        let series: Vec<Series> = by_sigma
            .iter()
            .map(|(s, v)| {
                let mut pts = v.clone();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series { label: Box::leak(format!("sigma = {s}").into_boxed_str()), points: pts }
            })
            .collect();
        line_plot(
            &dir.dir.join("time_gap_vs_omega.svg"),
            "time gap vs guidance strength",
            "omega0",
            "time gap (steps)",
            &series,
        )?;
    }
    Ok(all_ok)
}

/// Two-condition comparison across predictor variants.
pub fn cmd_multicond(cfg: &ExperimentConfig, dir: &RunDir) -> Result<bool> {
    dir.write_manifest("multicond", cfg)?;
    let (_, schedule) = cfg.resolve_schedule(ScheduleConfig::default())?;
    let gm = &cfg.mixture;
    let score_src = ScoreSource::analytic(gm, &schedule)?;
    let tls = TlsSource::analytic(gm, &schedule)?;
    let mc = &cfg.multicond;
    let steps = full_step_indices(schedule.num_steps);

    let mut cells: Vec<(MulticondVariant, f64)> = Vec::new();
    for variant in [MulticondVariant::SinglePredictor, MulticondVariant::UncondPredictor] {
        cells.push((variant, 0.0));
        for &omega0 in &cfg.omega_grid {
            if omega0 > 0.0 {
                cells.push((variant, omega0));
            }
        }
    }
    let results = run_cells(cfg.workers, cells, |&(variant, omega0)| {
        let strengths = MulticondStrengths {
            rho_kind: cfg.omega_kind,
            rho0: mc.rho0,
            omega_kind: cfg.omega_kind,
            omega0,
            eta_sq: None,
            eta_tilde_sq: None,
        };
        let set = sample_multicond(
            variant,
            &score_src,
            &tls,
            &mc.cond1,
            &mc.cond2,
            &strengths,
            &steps,
            cfg.n_samples,
            cfg.seed,
        )?;
        let terminal = set.terminal_states();
        let mut hits = 0usize;
        for r in 0..terminal.rows {
            let x = terminal.row(r);
            let ok1 = mc.cond1.property.eval(x)?[0];
            let ok2 = mc.cond2.property.eval(x)?[0];
            if (ok1 - mc.cond1.target[0]).abs() <= mc.satisfaction_band
                && (ok2 - mc.cond2.target[0]).abs() <= mc.satisfaction_band
            {
                hits += 1;
            }
        }
        let rate = hits as f64 / terminal.rows as f64;
        Ok::<_, taglab_core::Error>((variant, omega0, rate))
    });

    let mut rows = Vec::new();
    let mut table: Vec<(MulticondVariant, f64, f64)> = Vec::new();
    for cell in results {
        let (variant, omega0, rate) = cell?;
        println!("{variant:?} omega0={omega0}: joint satisfaction = {rate:.3}");
        let mut row = summary(cfg, "multicond", format!("{variant:?}_w{omega0}"));
        row.extra = Some(json!({"joint_satisfaction": rate, "rho0": mc.rho0}));
        rows.push(row);
        table.push((variant, omega0, rate));
    }
    dir.write_results_csv(&rows)?;

    let mut all_ok = true;
    let mut per_variant = Vec::new();
    for variant in [MulticondVariant::SinglePredictor, MulticondVariant::UncondPredictor] {
        let baseline = table
            .iter()
            .find(|(v, w, _)| *v == variant && *w == 0.0)
            .map(|&(_, _, r)| r)
            .unwrap_or(0.0);
        let best = table
            .iter()
            .filter(|(v, w, _)| *v == variant && *w > 0.0)
            .map(|&(_, w, r)| (w, r))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let ok = best.map(|(_, r)| r > baseline).unwrap_or(false);
        all_ok &= ok;
        per_variant.push(json!({
            "variant": format!("{variant:?}"),
            "baseline_rate": baseline,
            "best": best.map(|(w, r)| json!({"omega0": w, "rate": r})),
            "tag_exceeds_baseline": ok,
        }));
    }
    dir.write_json("report.json", &json!({"variants": per_variant, "all_hold": all_ok}))?;
    Ok(all_ok)
}

/// Plain vs modified Langevin first-exit study on the recorded instance.
pub fn cmd_escape(cfg: &ExperimentConfig, dir: &RunDir) -> Result<bool> {
    dir.write_manifest("escape", cfg)?;
    let esc = &cfg.escape;
    let schedule = NoiseSchedule::from_betas(esc.betas.clone())?;
    let family = MarginalFamily::new(&esc.mixture, &schedule)?;
    let target = &family.marginals[esc.target_step - 1];
    // Peak density over the component centers.
    let peak = target
        .means
        .iter()
        .map(|m| target.log_density(m).unwrap_or(f64::NEG_INFINITY).exp())
        .fold(0.0f64, f64::max);
    let epsilon = esc.epsilon_fraction * peak;
    let init = InitDist::Point(esc.init_point.clone());

    let cells = vec![LangevinKind::Plain, LangevinKind::Modified];
    let results = run_cells(cfg.workers, cells, |&kind| {
        estimate_escape_time(
            kind,
            &family,
            esc.target_step,
            epsilon,
            &init,
            esc.step_size,
            esc.max_steps,
            esc.trials,
            cfg.seed,
        )
    });
    let plain = results[0].as_ref().map_err(|e| anyhow!("{e}"))?.clone();
    let modified = results[1].as_ref().map_err(|e| anyhow!("{e}"))?.clone();
    for (name, rep) in [("plain", &plain), ("modified", &modified)] {
        println!(
            "{name}: mean exit = {:?}, median = {:?}, censored = {}/{}",
            rep.mean_exit, rep.median_exit, rep.censored, rep.trials
        );
        if rep.all_censored {
            println!("warning: every {name} trial was censored at {} steps", esc.max_steps);
        }
    }
    let a: Vec<f64> = modified.exit_steps.iter().map(|&s| s as f64).collect();
    let b: Vec<f64> = plain.exit_steps.iter().map(|&s| s as f64).collect();
    let mw = mann_whitney_one_sided(&a, &b)?;
    println!("mann-whitney (modified < plain): z = {:.3}, p = {:.3e}", mw.z, mw.p_value);

    let accelerated = match (modified.mean_exit, plain.mean_exit) {
        (Some(m), Some(p)) => m < p && mw.p_value < 0.05,
        _ => false,
    };
    let mut rows = Vec::new();
    for (name, rep) in [("plain", &plain), ("modified", &modified)] {
        let mut row = summary(cfg, "escape", name.into());
        row.extra = Some(json!({
            "mean_exit": rep.mean_exit,
            "median_exit": rep.median_exit,
            "censored": rep.censored,
            "trials": rep.trials,
        }));
        rows.push(row);
    }
    dir.write_results_csv(&rows)?;
    dir.write_json(
        "report.json",
        &json!({
            "epsilon": epsilon,
            "plain_mean_exit": plain.mean_exit,
            "modified_mean_exit": modified.mean_exit,
            "plain_censored": plain.censored,
            "modified_censored": modified.censored,
            "mann_whitney_z": mw.z,
            "mann_whitney_p": mw.p_value,
            "modified_faster": accelerated,
        }),
    )?;
    Ok(accelerated)
}

/// DDIM step-count sweep with and without guidance.
pub fn cmd_fewstep(cfg: &ExperimentConfig, dir: &RunDir) -> Result<bool> {
    dir.write_manifest("fewstep", cfg)?;
    let (_, schedule) = cfg.resolve_schedule(fully_noised())?;
    let gm = &cfg.mixture;
    let score_src = ScoreSource::analytic(gm, &schedule)?;
    let tls = TlsSource::analytic(gm, &schedule)?;
    let reference = Matrix::from_vec(
        cfg.n_samples,
        gm.dim(),
        gm.sample(cfg.n_samples, &mut Rng::from_stream(cfg.seed, &[0x524546])),
    );

    let mut cells = Vec::new();
    for &nfe in &cfg.nfe_grid {
        cells.push((nfe, 0.0));
        for &omega0 in &cfg.omega_grid {
            if omega0 > 0.0 {
                cells.push((nfe, omega0));
            }
        }
    }
    let results = run_cells(cfg.workers, cells, |&(nfe, omega0)| {
        let steps = ddim_step_indices(schedule.num_steps, nfe);
        let tag = if omega0 > 0.0 {
            Some(TagConfig { tls: &tls, omega_kind: cfg.omega_kind, omega0 })
        } else {
            None
        };
        let set: TrajectorySet = run_reverse(
            &score_src,
            &ReverseConfig {
                kind: SamplerKind::Ddim,
                steps,
                n_trajectories: cfg.n_samples,
                seed: cfg.seed,
                corruption_sigma: 0.0,
                tag,
                drift: None,
                record_predicted_times: false,
            },
        )?;
        let w1 = sliced_w1(&set.terminal_states(), &reference, cfg.w1_projections, cfg.seed)?;
        Ok::<_, taglab_core::Error>((nfe, omega0, w1))
    });

    let mut rows = Vec::new();
    let mut table: Vec<(usize, f64, f64)> = Vec::new();
    for cell in results {
        let (nfe, omega0, w1) = cell?;
        println!("nfe={nfe} omega0={omega0}: W1 = {w1:.3}");
        let mut row = summary(cfg, "fewstep", format!("nfe{nfe}_w{omega0}"));
        row.sliced_w1 = Some(w1);
        rows.push(row);
        table.push((nfe, omega0, w1));
    }
    dir.write_results_csv(&rows)?;

    let mut per_nfe = Vec::new();
    let mut improves_low = true;
    for &nfe in &cfg.nfe_grid {
        let plain = table.iter().find(|(n, w, _)| *n == nfe && *w == 0.0).map(|&(_, _, v)| v);
        let best = table
            .iter()
            .filter(|(n, w, _)| *n == nfe && *w > 0.0)
            .map(|&(_, w, v)| (w, v))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let improved = match (plain, best) {
            (Some(p), Some((_, b))) => b < p,
            _ => false,
        };
        if nfe <= 5 {
            improves_low &= improved;
        }
        per_nfe.push(json!({
            "nfe": nfe,
            "plain_w1": plain,
            "best_tag": best.map(|(w, v)| json!({"omega0": w, "w1": v})),
            "tag_improves": improved,
        }));
    }
    dir.write_json(
        "report.json",
        &json!({"per_nfe": per_nfe, "tag_improves_at_low_nfe": improves_low}),
    )?;

    if cfg.plots {
        let mut plain_pts: Vec<(f64, f64)> = table
            .iter()
            .filter(|(_, w, _)| *w == 0.0)
            .map(|&(n, _, v)| (n as f64, v))
            .collect();
        plain_pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut best_pts: Vec<(f64, f64)> = cfg
            .nfe_grid
            .iter()
            .filter_map(|&n| {
                table
                    .iter()
                    .filter(|(m, w, _)| *m == n && *w > 0.0)
                    .map(|&(_, _, v)| v)
                    .min_by(f64::total_cmp)
                    .map(|v| (n as f64, v))
            })
            .collect();
        best_pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        line_plot(
            &dir.dir.join("w1_vs_nfe.svg"),
            "terminal sliced W1 vs evaluation count",
            "NFE",
            "sliced W1",
            &[
                Series { label: "plain DDIM", points: plain_pts },
                Series { label: "best guided", points: best_pts },
            ],
        )?;
    }
    Ok(true)
}
