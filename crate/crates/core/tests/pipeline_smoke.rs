//! Reduced-config end-to-end run: every stage executes, the trained
//! pipeline beats chance, and the mode ordering points the right way.

use trajpilot_core::alignment::AlignConfig;
use trajpilot_core::cem::LatentConfig;
use trajpilot_core::eval::{
    control_stats, eval_cem_comparison, eval_plan_modes, eval_samples, EvalSettings,
    LatentReadout, EVAL_HORIZONS,
};
use trajpilot_core::pilot::ScorerConfig;
use trajpilot_core::pipeline::{build_artifacts, RunConfig};
use trajpilot_core::predictor::PredictorConfig;
use trajpilot_core::synthworld::WorldConfig;

pub fn smoke_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        world: WorldConfig {
            n_takes: 16,
            segments_per_take: 10,
            ..Default::default()
        },
        align: AlignConfig {
            epochs: 30,
            ..Default::default()
        },
        predictor: PredictorConfig {
            epochs: 8,
            ..Default::default()
        },
        scorer: ScorerConfig {
            epochs: 20,
            ..Default::default()
        },
        scorer_max_train_windows: 160,
        latent: LatentConfig {
            epochs: 10,
            ..Default::default()
        },
        eval: EvalSettings {
            cem_max_samples: 6,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn reduced_pipeline_learns_and_orders_modes() {
    let t0 = std::time::Instant::now();
    let cfg = smoke_config(0);
    let artifacts = build_artifacts(&cfg).expect("pipeline build");
    eprintln!(
        "[smoke] artifacts built in {:.1}s (align R@1 {:.3} after {} epochs, gate+ {:.2})",
        t0.elapsed().as_secs_f64(),
        artifacts.align_report.final_holdout_r1,
        artifacts.align_report.epochs_run,
        artifacts.scorer_report.gate_positive_fraction,
    );
    assert!(
        artifacts.align_report.final_holdout_r1 > 0.5,
        "alignment barely beats chance: {}",
        artifacts.align_report.final_holdout_r1
    );

    let samples = eval_samples(&artifacts.world.test, &artifacts.align, &EVAL_HORIZONS).unwrap();
    let t1 = std::time::Instant::now();
    let planning = eval_plan_modes(
        &samples,
        &artifacts.world.bank,
        &artifacts.predictor,
        Some((&artifacts.scorer, &artifacts.bank)),
        &cfg.eval,
        false,
    )
    .unwrap();
    eprintln!("[smoke] planning eval in {:.1}s", t1.elapsed().as_secs_f64());
    let nt = planning.reports["notraj"].overall.m_at_1;
    let or = planning.reports["oracle"].overall.m_at_1;
    let sc = planning.reports["scorer"].overall.m_at_1;
    eprintln!(
        "[smoke] overall mid R@1: notraj {nt:.3}, scorer {sc:.3}, oracle {or:.3}; gates {:?}",
        planning.gate_rates.per_horizon
    );
    assert!(or > nt, "oracle must beat no-trajectory ({or:.3} vs {nt:.3})");

    let t2 = std::time::Instant::now();
    let readout = LatentReadout::fit(&artifacts.world.train).unwrap();
    let stats = control_stats(&artifacts.world.train, &EVAL_HORIZONS).unwrap();
    let cem = eval_cem_comparison(
        &samples,
        &readout,
        &artifacts.latent_traj,
        &artifacts.latent_notraj,
        &cfg.eval,
        &stats,
        cfg.seed,
    )
    .unwrap();
    eprintln!("[smoke] cem eval in {:.1}s", t2.elapsed().as_secs_f64());
    for name in ["latent_notraj", "latent_oracle", "cem"] {
        eprintln!(
            "[smoke] {name} overall mid R@1 {:.3}",
            cem.reports[name].overall.m_at_1
        );
    }
    let lo = cem.reports["latent_oracle"].overall.m_at_1;
    let ln = cem.reports["latent_notraj"].overall.m_at_1;
    assert!(lo > ln, "latent oracle must beat latent no-traj ({lo:.3} vs {ln:.3})");
    eprintln!("[smoke] total {:.1}s", t0.elapsed().as_secs_f64());
}
