//! One PASS/FAIL line per acceptance criterion, each judged at its stated
//! tolerance. Exits non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use wavy_core::blocks::{LnPlacement, ModelConfig, ModelParams};
use wavy_core::diagnostics::{deviation_contraction_residual, deviation_sq, potential_rate};
use wavy_core::dynamics::{diffuse_step, Variant};
use wavy_core::experiments::{
    blockcheck, diffusion_suite, frozen_attention, gradcheck, oversmoothing, wave_suite, BlockcheckSettings,
    DynamicsConfig, GradcheckSettings,
};
use wavy_core::numerics::{gaussian_init, Prng};
use wavy_core::train::{evaluate, train, validation_set, TaskKind, TaskSpec, TrainConfig, TrainOutcome};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn random_dynamics(rng: &mut Prng) -> DynamicsConfig {
    DynamicsConfig {
        n: 2 + rng.below(15),
        d: 1 + rng.below(32),
        seed: rng.next_u64(),
        ..DynamicsConfig::new(0)
    }
}

fn scheme_equivalence() -> Verdict {
    let t = Instant::now();
    let r = blockcheck(&BlockcheckSettings {
        identity_instances: 0,
        ..BlockcheckSettings::default()
    })
    .unwrap();
    let el = t.elapsed();
    verdict(
        r.scheme_equivalence <= 1e-12 && r.scheme_instances == 100 && el < Duration::from_secs(1),
        format!("max rel error {:.3e} over {} instances, {:.3}s", r.scheme_equivalence, r.scheme_instances, secs(el)),
    )
}

fn deviation_contraction() -> Verdict {
    let t = Instant::now();
    let mut rng = Prng::new(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let cfg = random_dynamics(&mut rng);
        let (_, a) = frozen_attention(&cfg).unwrap();
        let x = gaussian_init(&mut rng, cfg.n, cfg.d, 1.0);
        let tau = rng.uniform(0.05, 1.0);
        let next = diffuse_step(&x, &a, tau).unwrap();
        let r = deviation_contraction_residual(&next, &x, &a, tau).unwrap();
        worst = worst.max(r / x.max_abs().max(1.0));
    }
    let el = t.elapsed();
    verdict(
        worst <= 1e-13 && el < Duration::from_secs(1),
        format!("max scaled residual {worst:.3e}, {:.3}s", secs(el)),
    )
}

fn diffusion_dissipation() -> Verdict {
    let t = Instant::now();
    let (x0, a) = frozen_attention(&DynamicsConfig::new(0)).unwrap();
    let r = diffusion_suite(&x0, &a, 0.5, 5000).unwrap();
    let el = t.elapsed();
    verdict(
        r.violations == 0 && r.final_cos_sim >= 1.0 - 1e-6 && el < Duration::from_secs(10),
        format!(
            "{} violations, max increase {:.3e}, final CosSim {:.12}, {:.2}s",
            r.violations,
            r.max_increase,
            r.final_cos_sim,
            secs(el)
        ),
    )
}

fn wave_energy() -> Verdict {
    let t = Instant::now();
    let (x0, a) = frozen_attention(&DynamicsConfig::new(0)).unwrap();
    let r = wave_suite(&x0, &a, 0.1, 10_000).unwrap();
    let el = t.elapsed();
    verdict(
        r.full.band < 0.05
            && r.full.relative_slope.abs() < 1e-6
            && (1.5..=2.5).contains(&r.band_ratio)
            && el < Duration::from_secs(30),
        format!(
            "band {:.4}, slope {:.2e} E0/step, band ratio tau/(tau/2) {:.3}, {:.2}s",
            r.full.band,
            r.full.relative_slope,
            r.band_ratio,
            secs(el)
        ),
    )
}

fn potential_rate_identity() -> Verdict {
    let mut rng = Prng::new(5);
    let (mut worst, mut ratio_lo, mut ratio_hi) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..10 {
        let cfg = random_dynamics(&mut rng);
        let (_, a) = frozen_attention(&cfg).unwrap();
        let x = gaussian_init(&mut rng, cfg.n, cfg.d, 1.0);
        let rate = potential_rate(&x, &a, 1e-4).unwrap();
        let claimed = -0.5 * deviation_sq(&x, &a).unwrap();
        worst = worst.max((rate - claimed).abs() / claimed.abs());
        ratio_lo = ratio_lo.min(rate / claimed);
        ratio_hi = ratio_hi.max(rate / claimed);
    }
    verdict(
        worst <= 0.01,
        format!("max rel gap to -1/2 sum |Xbar_i - X_i|^2: {worst:.3e}; measured/claimed in [{ratio_lo:.4}, {ratio_hi:.4}]"),
    )
}

fn grad_suites() -> (Verdict, Verdict) {
    let t = Instant::now();
    let r = gradcheck(&GradcheckSettings {
        relu: false,
        ..GradcheckSettings::default()
    })
    .unwrap();
    let el = t.elapsed();
    let jvp = verdict(
        r.ffn_velocity.pass && r.ln_velocity.pass && r.ffn_velocity.instances == 100 && r.ln_velocity.instances == 100,
        format!(
            "FFN_v max rel {:.3e} (tol 1e-6), LN_v max rel {:.3e} (tol 1e-8), 100 instances each",
            r.ffn_velocity.max_rel_error, r.ln_velocity.max_rel_error
        ),
    );
    let worst = r.models.iter().map(|m| m.max_rel_error).fold(0.0, f64::max);
    let min_checked = r.models.iter().map(|m| m.checked).min().unwrap_or(0);
    let full = verdict(
        r.models.len() == 8 && r.models.iter().all(|m| m.pass) && min_checked >= 20 && el < Duration::from_secs(120),
        format!(
            "{} combinations, worst rel error {worst:.3e}, at least {min_checked} coordinates each, {:.2}s",
            r.models.len(),
            secs(el)
        ),
    );
    (jvp, full)
}

fn preln_identity() -> Verdict {
    let r = blockcheck(&BlockcheckSettings {
        instances: 0,
        taus: vec![0.5],
        identity_instances: 50,
        ..BlockcheckSettings::default()
    })
    .unwrap();
    verdict(
        r.preln_identity <= 1e-10 && r.identity_instances == 50,
        format!("max abs discrepancy {:.3e} over 50 instances", r.preln_identity),
    )
}

fn oversmoothing_signatures() -> Verdict {
    let means = |variant| {
        let cfg = ModelConfig {
            layers: 8,
            residual_variant: variant,
            ln_placement: LnPlacement::Post,
            ..ModelConfig::default()
        };
        oversmoothing(&cfg, 0, 32, 16, 1).unwrap().means()
    };
    let diffuse = means(Variant::Diffuse);
    let wave = means(Variant::Wave);
    let monotone = diffuse[1..].windows(2).all(|w| w[1] >= w[0]);
    let rises = diffuse[diffuse.len() - 1] > diffuse[0];
    let biggest_drop = wave.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    let fmt = |v: &[f64]| v.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" ");
    verdict(
        monotone && rises && biggest_drop > 1e-6,
        format!("diffuse [{}]; wave [{}]; largest wave drop {biggest_drop:.3e}", fmt(&diffuse), fmt(&wave)),
    )
}

fn toy_model(variant: Variant, layers: usize, tau: f64) -> ModelParams {
    let cfg = ModelConfig {
        vocab: 16,
        max_len: 16,
        layers,
        d_model: 32,
        residual_variant: variant,
        tau,
        ..ModelConfig::default()
    };
    ModelParams::init(&cfg, 0).unwrap()
}

fn run(m: &ModelParams, task: &TaskSpec, cfg: &TrainConfig) -> TrainOutcome {
    train(m, task, cfg).unwrap_or_else(|f| panic!("training failed: {f}"))
}

fn toy_trainability() -> Verdict {
    let task = TaskSpec::new(TaskKind::MajorityToken, 16, 16, 0);
    let cfg = TrainConfig::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for variant in [Variant::Diffuse, Variant::Wave, Variant::MixVelocity] {
        let m = toy_model(variant, 4, 0.5);
        let t = Instant::now();
        let a = run(&m, &task, &cfg);
        let el = t.elapsed();
        let b = run(&m, &task, &cfg);
        let acc = a.log.last().map_or(0.0, |r| r.accuracy);
        let same = a.log == b.log && a.model == b.model;
        pass &= acc >= 0.9 && same && el < Duration::from_secs(300);
        parts.push(format!("{} acc {acc:.3} in {:.0}s, rerun identical: {same}", variant.name(), secs(el)));
    }
    verdict(pass, parts.join("; "))
}

fn gate_learnability() -> Verdict {
    // One mix_velocity layer with tau = 3: the wave branch overshoots, the
    // effective attention step at lambda = 1/2 is 6.
    let task = TaskSpec::new(TaskKind::MajorityToken, 16, 16, 0);
    let m = toy_model(Variant::MixVelocity, 1, 3.0);
    let out = run(&m, &task, &TrainConfig::default());
    let lambda = out.model.lambda_mean().unwrap();
    let val = validation_set(&task, 256).unwrap();
    let mut reset = out.model.clone();
    for (l, init) in reset.layers.iter_mut().zip(&m.layers) {
        l.step.theta = init.step.theta.clone();
    }
    let (trained_loss, _) = evaluate(&out.model, &val).unwrap();
    let (reset_loss, _) = evaluate(&reset, &val).unwrap();
    let moved = (lambda - 0.5).abs();
    verdict(
        moved >= 0.05 && trained_loss < reset_loss,
        format!(
            "lambda 0.5 -> {lambda:.4} (moved {moved:.4}); val loss {trained_loss:.5} trained vs {reset_loss:.5} with gates reset"
        ),
    )
}

fn report(k: u32, name: &str, v: Verdict) -> bool {
    println!("{} criterion {k:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v.pass
}

fn main() -> ExitCode {
    let mut passed = Vec::new();
    passed.push(report(1, "scheme equivalence", scheme_equivalence()));
    passed.push(report(2, "deviation contraction", deviation_contraction()));
    passed.push(report(3, "diffusion dissipation", diffusion_dissipation()));
    passed.push(report(4, "wave energy", wave_energy()));
    passed.push(report(5, "dU/dt identity", potential_rate_identity()));
    let (jvp, full) = grad_suites();
    passed.push(report(6, "chain-rule layers", jvp));
    passed.push(report(7, "Pre-LN diffusion-reaction identity", preln_identity()));
    passed.push(report(8, "full-model gradients", full));
    passed.push(report(9, "over-smoothing signatures", oversmoothing_signatures()));
    passed.push(report(10, "toy trainability", toy_trainability()));
    passed.push(report(11, "gate learnability", gate_learnability()));
    let ok = passed.iter().filter(|p| **p).count();
    println!("{ok} of {} criteria passed", passed.len());
    if ok == passed.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
