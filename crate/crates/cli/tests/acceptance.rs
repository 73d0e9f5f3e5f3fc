//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails afterwards if any criterion failed.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng as _;

use rnadiff::ablation::tau_ablation;
use rnadiff::checkpoint::Checkpoint;
use rnadiff::config::Config;
use rnadiff::data::{gen_synthetic, RnaRecord, SynthConfig};
use rnadiff::evaluate::evaluate_model;
use rnadiff::fold::{brute_force_fold, fold_mfe, PairEnergies};
use rnadiff::gradcheck::{check_gradients, compare_gradients, probe_indices};
use rnadiff::metrics::{kabsch_rmsd, lddt, nt_recovery, one_hot, BackboneCoords};
use rnadiff::model::{Denoiser, Group, LdmSample, ModelConfig, ModelState};
use rnadiff::pretrain::{reconstruction_recovery, sampling_recovery, train_autoencoder, train_ldm, TrainConfig};
use rnadiff::rewards::{mfe_reward, RewardSpec};
use rnadiff::rng::{self, normal_vec};
use rnadiff::sampler::{ddim_jump, SamplerKind};
use rnadiff::schedule::NoiseSchedule;
use rnadiff::sequence::{Base, BASES};
use rnadiff::tensor::Mat;
use rnadiff::trainer::{finetune, policy_loss, policy_rewards, policy_terms, PolicySample, PpoConfig, STAGE_KEY};

type Check = Result<(bool, String), String>;

// Tolerances.
const VARIANCE_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-3;
const RMSD_FLOOR: f64 = 1e-3;
const RMSD_DRIFT_TOL: f64 = 1e-6;
const MAPPING_TOL: f64 = 1e-6;
const OVERFIT_RECOVERY: f64 = 0.95;

// Runtime budgets.
const BUDGET_1: Duration = Duration::from_secs(1);
const BUDGET_2: Duration = Duration::from_secs(120);
const BUDGET_3: Duration = Duration::from_secs(60);
const BUDGET_6: Duration = Duration::from_secs(300);
const BUDGET_7: Duration = Duration::from_secs(900);
const BUDGET_8: Duration = Duration::from_secs(1200);

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn random_seq(r: &mut rng::Rng, len: usize) -> Vec<Base> {
    (0..len).map(|_| BASES[r.random_range(0..4)]).collect()
}

fn random_mat(r: &mut rng::Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, normal_vec(r, rows * cols)).unwrap()
}

fn criterion_1() -> Check {
    let sched = NoiseSchedule::cosine(100, 0.008).map_err(e)?;
    let mut worst: f64 = 0.0;
    for t in 1..=100 {
        let (_, _, var) = sched.posterior_coeffs(t).map_err(e)?;
        let c = sched.ddim_coeffs(t, 1, 1.0).map_err(e)?;
        worst = worst.max((c.sigma * c.sigma - var).abs());
    }
    let state = ModelState::new(
        ModelConfig { embed_dim: 8, hidden: 8, latent_dim: 4, denoiser_hidden: 8, blocks: 1, time_dim: 8, neighbors: 2 },
        1,
    )
    .map_err(e)?;
    let mut r = rng::seeded(2);
    let mut exact = true;
    for t in [1, 7, 50, 100] {
        let z = random_mat(&mut r, 5, 4);
        let c = random_mat(&mut r, 5, state.config.cond_dim());
        let jumped = ddim_jump(&z, t, t, 1.0, &c, &state, &sched, &mut r).map_err(e)?;
        exact &= jumped == state.predict(&z, t, &c).map_err(e)?;
    }
    Ok((
        worst <= VARIANCE_TOL && exact,
        format!("max variance gap {worst:.2e}, full jump bit-exact {exact}"),
    ))
}

fn small_model(r: &mut rng::Rng, seed: u64) -> ModelState {
    let config = ModelConfig {
        embed_dim: 8,
        hidden: r.random_range(4..=12),
        latent_dim: r.random_range(2..=6),
        denoiser_hidden: r.random_range(4..=12),
        blocks: r.random_range(1..=2),
        time_dim: 2 * r.random_range(2..=4),
        neighbors: r.random_range(1..=3),
    };
    ModelState::new(config, seed).unwrap()
}

fn criterion_2() -> Check {
    let sched = NoiseSchedule::cosine(100, 0.008).map_err(e)?;
    let mut r = rng::seeded(20);
    let (mut ldm_worst, mut pol_worst) = (0.0f64, 0.0f64);
    for i in 0..50u64 {
        let state = small_model(&mut r, 100 + i);
        let (d, c) = (state.config.latent_dim, state.config.cond_dim());
        let n = r.random_range(3..=9);
        let sample = LdmSample {
            target: random_seq(&mut r, n),
            t: r.random_range(1..=100),
            eps: random_mat(&mut r, n, d),
            cond: random_mat(&mut r, n, c),
        };
        let rep = check_gradients(&state, &sample, &sched, 200, &mut r).map_err(e)?;
        ldm_worst = ldm_worst.max(rep.max_rel_error);

        // Actions are drawn around the policy mean, as rollouts draw them.
        let (z_t, t, cond) = (random_mat(&mut r, n, d), r.random_range(2..=100), random_mat(&mut r, n, c));
        let short_term = i % 2 == 0;
        let sigma = r.random_range(0.05..1.0);
        let z0_hat = state.predict(&z_t, t, &cond).map_err(e)?;
        let mean = if short_term { sched.posterior_params(&z_t, &z0_hat, t).map_err(e)?.0 } else { z0_hat };
        let action = mean.lin_comb(1.0, &random_mat(&mut r, n, d), sigma);
        let s = PolicySample { z_t, t, cond, action, sigma, short_term };
        let cfg = PpoConfig { clip: if i % 3 == 0 { 1e-4 } else { 0.2 }, ..Default::default() };
        let offset = r.random_range(0.05..0.5) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let adv = r.random_range(-2.0..2.0);
        let lp_ref = s.logprob(&state, &sched).map_err(e)? + offset;
        let (_, grads) = policy_loss(&state, &s, lp_ref, adv, &cfg, &sched).map_err(e)?;
        let idx: Vec<usize> = probe_indices(&state, 200, &mut r)
            .into_iter()
            .filter(|&f| Group::of(&state.params.get(state.params.locate(f).0).name) == Group::Denoiser)
            .collect();
        let rep = compare_gradients(&state, &grads, &idx, |m| {
            Ok(policy_terms(s.logprob(m, &sched)?, lp_ref, adv, &cfg).loss)
        })
        .map_err(e)?;
        if rep.max_rel_error > GRAD_TOL {
            eprintln!("policy instance {i}: {rep:?}, sigma {sigma}, t {t}");
        }
        pol_worst = pol_worst.max(rep.max_rel_error);
    }
    Ok((
        ldm_worst <= GRAD_TOL && pol_worst <= GRAD_TOL,
        format!("max relative error: latent loss {ldm_worst:.2e}, policy loss {pol_worst:.2e}"),
    ))
}

fn criterion_3() -> Check {
    let em = PairEnergies::default();
    let mut r = rng::seeded(30);
    let mut mismatches = 0;
    for _ in 0..500 {
        let len = r.random_range(1..=12);
        let seq = random_seq(&mut r, len);
        if fold_mfe(&seq, &em).map_err(e)?.energy != brute_force_fold(&seq, &em).map_err(e)?.energy {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches over 500 sequences")))
}

fn random_rotation(r: &mut rng::Rng) -> UnitQuaternion<f64> {
    let v = normal_vec(r, 4);
    UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]))
}

fn criterion_4() -> Check {
    let mut r = rng::seeded(40);
    let truth = BackboneCoords::from_arrays(
        &(0..12)
            .map(|_| [r.random_range(-10.0..10.0), r.random_range(-10.0..10.0), r.random_range(-10.0..10.0)])
            .collect::<Vec<_>>(),
    )
    .map_err(e)?;
    let (mut drift, mut lddt_gap) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let rot = random_rotation(&mut r).to_rotation_matrix().into_inner();
        let shift = Vector3::new(r.random_range(-50.0..50.0), r.random_range(-50.0..50.0), r.random_range(-50.0..50.0));
        let moved = truth.transformed(&rot, &shift);
        drift = drift.max((kabsch_rmsd(&truth, &moved).map_err(e)? - RMSD_FLOOR).abs());
        lddt_gap = lddt_gap.max((lddt(&truth, &moved).map_err(e)? - 1.0).abs());
    }
    // Collinear 0, 4, 8; the third atom moves to stay 4 Å from the second and
    // 6.5 Å from the first, so only the (0, 2) distance deviates, by 1.5.
    let x = 42.25 / 8.0;
    let y: f64 = 42.25 - x * x;
    let t3 = BackboneCoords::from_arrays(&[[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [8.0, 0.0, 0.0]]).map_err(e)?;
    let p3 = BackboneCoords::from_arrays(&[[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [x, y.sqrt(), 0.0]]).map_err(e)?;
    let hand = (1.0 + 1.0 + 0.5) / 3.0;
    let got = lddt(&t3, &p3).map_err(e)?;
    let long: Vec<Base> = vec![Base::A; 8];
    let half: Vec<Base> = [Base::A; 4].into_iter().chain([Base::U; 4]).collect();
    let short = vec![Base::G, Base::C];
    let pooled = nt_recovery([
        (short.as_slice(), &one_hot(&short)),
        (long.as_slice(), &one_hot(&half)),
    ])
    .map_err(e)?;
    let ok = drift <= RMSD_DRIFT_TOL && lddt_gap == 0.0 && (got - hand).abs() < 1e-12 && (pooled - 0.6).abs() < 1e-12;
    Ok((
        ok,
        format!("rmsd drift {drift:.1e}, isometry lddt gap {lddt_gap:.1e}, hand lddt {got:.6} (want {hand:.6}), pooled {pooled}"),
    ))
}

fn criterion_5() -> Check {
    let a = mfe_reward(0.0).map_err(e)?;
    let b = mfe_reward(-0.75).map_err(e)?;
    let mut r = rng::seeded(50);
    let mut xs: Vec<f64> = (0..1000).map(|_| r.random_range(-60.0..0.0)).collect();
    xs.sort_by(f64::total_cmp);
    let ys: Vec<f64> = xs.iter().map(|&x| mfe_reward(x).unwrap()).collect();
    let monotone = xs.windows(2).zip(ys.windows(2)).all(|(x, y)| x[0] == x[1] || y[0] > y[1]);
    let ok = (a - 0.018316).abs() <= MAPPING_TOL && (b - 0.367879).abs() <= MAPPING_TOL && monotone;
    Ok((ok, format!("r(0) = {a:.6}, r(-0.75) = {b:.6}, strictly higher at lower energy {monotone}")))
}

fn criterion_6() -> Check {
    let em = PairEnergies::default();
    let recs = gen_synthetic(
        &SynthConfig { count: 1, min_len: 40, max_len: 40, neighbors: 4, coord_noise: None },
        &em,
        7,
    )
    .map_err(e)?;
    let model = ModelConfig { embed_dim: 16, hidden: 32, latent_dim: 8, denoiser_hidden: 64, blocks: 2, time_dim: 16, neighbors: 4 };
    let cfg = TrainConfig {
        autoencoder_epochs: 50,
        autoencoder_lr: 3e-3,
        epochs: 200,
        lr: 3e-3,
        batch_size: 4,
        repeats: 64,
        patience: 200,
        eval_every: 10,
        ..Default::default()
    };
    let sched = NoiseSchedule::cosine(100, 0.008).map_err(e)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(e)?;
    let (state, _) = pool.install(|| train_ldm(&recs, &[], model, &cfg, &sched, 1)).map_err(e)?;
    let rec = sampling_recovery(&state, &recs, &sched, SamplerKind::Ddpm, 99).map_err(e)?;
    Ok((rec >= OVERFIT_RECOVERY, format!("sampled recovery {rec:.3} on one 40-nt sequence, one thread")))
}

fn criterion_7() -> Check {
    let em = PairEnergies::default();
    let recs = gen_synthetic(
        &SynthConfig { count: 64, min_len: 20, max_len: 40, neighbors: 4, coord_noise: None },
        &em,
        70,
    )
    .map_err(e)?;
    let model = ModelConfig { embed_dim: 16, hidden: 32, latent_dim: 8, denoiser_hidden: 8, blocks: 1, time_dim: 8, neighbors: 4 };
    let cfg = TrainConfig { autoencoder_epochs: 20, batch_size: 8, patience: 100, ..Default::default() };
    let mut rows = Vec::new();
    for d in [8, 16, 32] {
        let mut state = ModelState::new(ModelConfig { latent_dim: d, ..model }, 71).map_err(e)?;
        train_autoencoder(&mut state, &recs, &[], &cfg, 71, &mut Vec::new()).map_err(e)?;
        rows.push((d, reconstruction_recovery(&state, &recs).map_err(e)?));
    }
    let ok = rows.windows(2).all(|w| w[1].1 >= w[0].1);
    let detail = rows.iter().map(|(d, r)| format!("D={d}: {r:.4}")).collect::<Vec<_>>().join(", ");
    Ok((ok, detail))
}

fn criterion_8() -> Check {
    let em = PairEnergies::default();
    let recs = gen_synthetic(
        &SynthConfig { count: 120, min_len: 16, max_len: 32, neighbors: 4, coord_noise: None },
        &em,
        11,
    )
    .map_err(e)?;
    let (pre, fine) = recs.split_at(100);
    let model = ModelConfig { embed_dim: 16, hidden: 32, latent_dim: 8, denoiser_hidden: 64, blocks: 2, time_dim: 16, neighbors: 4 };
    let tcfg = TrainConfig {
        autoencoder_epochs: 30,
        autoencoder_lr: 3e-3,
        epochs: 30,
        lr: 3e-3,
        batch_size: 8,
        eval_every: 10,
        patience: 100,
        ..Default::default()
    };
    let sched = NoiseSchedule::cosine(100, 0.008).map_err(e)?;
    let (state, _) = train_ldm(pre, &[], model, &tcfg, &sched, 1).map_err(e)?;
    let mut ck = Checkpoint::new(state);
    ck.meta.insert(STAGE_KEY.into(), "pretrained".into());

    let spec = RewardSpec::default();
    let ppo = PpoConfig { epochs: 30, lr: 1e-4, accum_steps: 8, group_size: 8, ..Default::default() };
    let score = |s: &ModelState| -> Result<f64, String> {
        let r = policy_rewards(s, fine, 8, &spec, &ppo, &sched, &em, 98).map_err(e)?;
        Ok(r.iter().sum::<f64>() / r.len() as f64)
    };
    let trajectory = |s: &ModelState| -> Result<f64, String> {
        Ok(evaluate_model(s, fine, 4, &sched, SamplerKind::Ddpm, &spec, &em, 99).map_err(e)?.mean_reward)
    };
    let base = score(&ck.state)?;
    let base_traj = trajectory(&ck.state)?;
    let mut tuned = Vec::new();
    let mut traj = Vec::new();
    for seed in 0..3 {
        let (out, _) = finetune(fine, &ck, &spec, &ppo, &sched, &em, seed).map_err(e)?;
        tuned.push(score(&out.state)?);
        traj.push(trajectory(&out.state)?);
    }
    let ok = tuned.iter().all(|&x| x > base);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    Ok((
        ok,
        format!(
            "policy reward {base:.3} -> [{}]; full-trajectory reward (informational) {base_traj:.3} -> [{}]",
            fmt(&tuned),
            fmt(&traj)
        ),
    ))
}

const CLI_CONFIG: &str = r#"
[data]
count = 40
min_len = 12
max_len = 24

[model]
embed_dim = 8
hidden = 16
latent_dim = 4
denoiser_hidden = 16
blocks = 1
time_dim = 8
neighbors = 4

[schedule]
steps = 20

[train]
autoencoder_epochs = 4
autoencoder_lr = 3e-3
epochs = 4
lr = 3e-3
batch_size = 8

[ppo]
epochs = 3
batch_size = 8
accum_steps = 4
lr = 1e-3

[sampler]
designs_per_record = 2
"#;

fn rnadiff(args: &[&str], out: &Path, cfg: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_rnadiff"))
        .args(["--seed", "5", "--config"])
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .status()
        .map_err(e)?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("rnadiff {args:?} exited with {status}"))
    }
}

fn read(p: PathBuf) -> Result<Vec<u8>, String> {
    std::fs::read(&p).map_err(|err| format!("{}: {err}", p.display()))
}

/// gen-data, pretrain, finetune and sample into `root`.
fn pipeline(root: &Path, cfg: &Path) -> Result<(), String> {
    let s = |p: &str| root.join(p).display().to_string();
    rnadiff(&["gen-data"], &root.join("data"), cfg)?;
    rnadiff(&["pretrain", "--data", &s("data")], &root.join("pre"), cfg)?;
    rnadiff(&["finetune", "--data", &s("data"), "--checkpoint", &s("pre/pretrained.ckpt")], &root.join("ft"), cfg)?;
    rnadiff(&["sample", "--data", &s("data"), "--checkpoint", &s("ft/finetuned.ckpt")], &root.join("sample"), cfg)
}

fn criterion_9(dir: &Path, cfg: &Path) -> Check {
    let data = dir.join("run_a/data").display().to_string();
    let ck = dir.join("run_a/pre/pretrained.ckpt").display().to_string();
    let args = ["ablate-tau", "--data", data.as_str(), "--checkpoint", ck.as_str()];
    rnadiff(&args, &dir.join("tau_a"), cfg)?;
    rnadiff(&args, &dir.join("tau_b"), cfg)?;
    let arms = ["long_only", "short_only", "tau60", "tau90"];
    let mut files = Vec::new();
    let mut reproducible = true;
    for arm in arms {
        let a = read(dir.join(format!("tau_a/curves/{arm}.tsv")))?;
        reproducible &= a == read(dir.join(format!("tau_b/curves/{arm}.tsv")))?;
        files.push(a);
    }
    let distinct = (0..4).all(|i| (i + 1..4).all(|j| files[i] != files[j]));

    let config = Config::parse(CLI_CONFIG).map_err(e)?;
    let pretrained = Checkpoint::load(Path::new(&ck)).map_err(e)?;
    let splits = rnadiff::data::read_dataset(Path::new(&data), &config.energy().map_err(e)?, 4).map_err(e)?;
    let fine: &[RnaRecord] = splits.get(rnadiff::data::Split::Finetune);
    let curves = tau_ablation(
        fine,
        &pretrained,
        &config.reward_spec(),
        &config.ppo,
        &config.schedule().map_err(e)?,
        &config.energy().map_err(e)?,
        5,
    )
    .map_err(e)?;
    let identity = curves.iter().all(|(_, c)| c.iter().all(|s| s.fresh_identity));
    Ok((
        reproducible && distinct && identity,
        format!("four arms reproducible {reproducible}, pairwise distinct {distinct}, ratio 1 and zero penalty after every refresh {identity}"),
    ))
}

fn criterion_10(dir: &Path, cfg: &Path) -> Check {
    pipeline(&dir.join("run_b"), cfg)?;
    let mut same = Vec::new();
    for f in ["sample/designs.fasta", "ft/curve.tsv", "pre/pretrained.ckpt", "ft/finetuned.ckpt"] {
        same.push((f, read(dir.join("run_a").join(f))? == read(dir.join("run_b").join(f))?));
    }
    let ok = same.iter().all(|(_, s)| *s);
    let detail = same.iter().map(|(f, s)| format!("{f} {}", if *s { "identical" } else { "differs" })).collect::<Vec<_>>().join(", ");
    Ok((ok, detail))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("config.toml");
    std::fs::write(&cfg, CLI_CONFIG).unwrap();
    let pipeline_a = pipeline(&tmp.path().join("run_a"), &cfg);

    type Job<'a> = Box<dyn FnOnce() -> Check + 'a>;
    let jobs: Vec<(usize, &str, Option<Duration>, Job)> = vec![
        (1, "schedule and sampler algebra", Some(BUDGET_1), Box::new(criterion_1)),
        (2, "gradient fidelity", Some(BUDGET_2), Box::new(criterion_2)),
        (3, "folding oracle equivalence", Some(BUDGET_3), Box::new(criterion_3)),
        (4, "metric oracles", None, Box::new(criterion_4)),
        (5, "energy mapping", None, Box::new(criterion_5)),
        (6, "single-sequence overfit", Some(BUDGET_6), Box::new(criterion_6)),
        (7, "latent width trend", Some(BUDGET_7), Box::new(criterion_7)),
        (8, "fine-tuning beats the frozen model", Some(BUDGET_8), Box::new(criterion_8)),
        (9, "threshold ablation machinery", None, Box::new(|| {
            pipeline_a.clone()?;
            criterion_9(tmp.path(), &cfg)
        })),
        (10, "determinism", None, Box::new(|| criterion_10(tmp.path(), &cfg))),
    ];
    let mut failed = Vec::new();
    for (id, name, budget, job) in jobs {
        let start = Instant::now();
        let result = job();
        let took = start.elapsed();
        let (pass, detail) = match result {
            Ok((pass, detail)) => match budget {
                Some(b) if took > b => (false, format!("{detail}; over budget {b:?}")),
                _ => (pass, detail),
            },
            Err(msg) => (false, format!("error: {msg}")),
        };
        println!("{} [{id:>2}] {name}: {detail} ({took:.1?})", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
