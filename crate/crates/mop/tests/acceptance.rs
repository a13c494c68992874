//! Acceptance suite: one line per criterion, non-zero exit when any fails.
//!
//! cargo test -p mop --test acceptance

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{random_matrix, random_rotation, rotate, toy_backend, Instance, Memo, Recorder};
use mop::cache::CachedLm;
use mop::toy::{ContextMode, ToyWorld};
use mop_core::corpus::{sample_exemplar_pool, split_dataset, Dataset};
use mop_core::embed::HashingEmbedder;
use mop_core::gating::{
    dense_loglik, gates, grad_objective, mixture_loglik, Agents, ExemplarText, GateState, GatingParams, Projected,
};
use mop_core::lm::{tempered_loglik, NgramConfig};
use mop_core::math::Matrix;
use mop_core::metrics::{fid, kl_cosine, mauve, KlCosineConfig, MauveConfig};
use mop_core::persona::{synthesize_personas, SynthConfig};
use mop_core::prompt::TaskTemplates;
use mop_core::rng::derive_seed;
use mop_core::simulate::{SimConfig, Simulator};
use mop_core::train::{evaluate_heldout, train_prepared, Hooks, Prepared, TrainConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let lm = Memo::new(toy_backend(11));
    let inst = Instance::new(3, 5, 4, 8, 0);
    let obs = inst.observations();
    let params = inst.params(4, 3.0, 0);
    let objective = |p: &GatingParams| grad_objective(&obs, p, &inst.state, inst.agents(&lm), 15).unwrap().0;
    let (_, grad) = grad_objective(&obs, &params, &inst.state, inst.agents(&lm), 15).unwrap();
    let analytic: Vec<f64> = grad.iter().collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    for (i, &a) in analytic.iter().enumerate() {
        let shifted = |delta: f64| {
            let mut p = params.clone();
            let mut idx = 0;
            p.for_each_mut(|v| {
                if idx == i {
                    *v += delta;
                }
                idx += 1;
            });
            objective(&p)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let scale = a.abs().max(fd.abs());
        if (a - fd).abs() > 1e-4 * scale + 1e-8 {
            bad += 1;
        }
        if scale > 1e-8 {
            worst = worst.max((a - fd).abs() / scale);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        bad == 0 && secs < 10.0,
        format!("{} coordinates, {bad} off, worst rel err {worst:.1e}, {secs:.2}s", analytic.len()),
    )
}

fn criterion_2() -> Outcome {
    let lm = Memo::new(toy_backend(5));
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    let mut instances = 0;
    for seed in 0..100 {
        let inst = Instance::new(3, 5, 1, 8, 1000 + seed);
        let params = inst.params(4, 2.0, seed);
        let proj = Projected::new(&params, &inst.state).unwrap();
        let obs = &inst.observations()[0];
        let agents = inst.agents(&lm);
        let g = gates(obs.x_raw, &params, &proj).unwrap();
        let mut terms = Vec::new();
        for k in 0..3 {
            for j in 0..5 {
                let sheet = agents.sheet(k, j, &obs.example.context, &obs.example.response).unwrap();
                terms.push(g.pi[k].ln() + g.omega[(k, j)].ln() + tempered_loglik(&sheet, params.tau(k)).unwrap());
            }
        }
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let brute = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
        let full = mixture_loglik(obs, &params, &proj, agents, 15).unwrap();
        let dense = dense_loglik(obs, &params, &proj, agents).unwrap();
        worst = worst.max((full - brute).abs()).max((dense - brute).abs());
        let by_m: Vec<f64> = [1, 2, 4]
            .iter()
            .map(|&m| mixture_loglik(obs, &params, &proj, agents, m).unwrap())
            .collect();
        if by_m.windows(2).any(|w| w[1] < w[0]) || by_m[2] > full + 1e-12 {
            violations += 1;
        }
        instances += 1;
    }
    check(
        worst <= 1e-10 && violations == 0,
        format!("max |top-15 - dense| {worst:.1e}, monotonicity violations {violations}/{instances}"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let seed = 0;
    let pi_star = [0.6, 0.3, 0.1];
    let world = ToyWorld::new(3, 8, 400, seed).unwrap();
    let mode = ContextMode::StyleCue {
        cue: 0.9,
        prefix: "about ",
    };
    let records = world.population(&pi_star, 1000, 40, mode, seed + 100, "r").unwrap();
    let ds = Dataset::new(records).unwrap();
    let backend = CachedLm::new(
        world
            .backend(NgramConfig {
                order: 3,
                alpha: 1e-3,
                cache_weight: 0.9,
            })
            .unwrap(),
    );
    let emb = HashingEmbedder::new(256, 3);
    let tpl = TaskTemplates::builtin("plain").unwrap();
    let (train_ds, held_ds) = split_dataset(&ds, 0.2, seed).unwrap();
    let synth = SynthConfig {
        k: 3,
        seed,
        representatives: 10,
        ..Default::default()
    };
    let (personas, assign, _) = synthesize_personas(&ds.training_view(), &emb, &backend, &tpl, &synth).unwrap();
    let style_of = |i: usize| world.style_index(ds.records()[i].label.as_deref().unwrap()).unwrap();
    let majority: Vec<usize> = (0..3)
        .map(|c| {
            let mut count = [0usize; 3];
            assign.members(c).into_iter().for_each(|i| count[style_of(i)] += 1);
            (0..3).max_by_key(|&s| count[s]).unwrap()
        })
        .collect();
    let pool = sample_exemplar_pool(&train_ds, 60, seed).unwrap();
    let state = GateState::build(&emb, &personas, &pool, ExemplarText::Response).unwrap();
    let agents = Agents::new(&personas, &pool, &tpl, &backend);
    let tr = Prepared::new(&emb, train_ds.training_view()).unwrap();
    let ho = Prepared::new(&emb, held_ds.training_view()).unwrap();
    let mut cfg = TrainConfig {
        m: 4,
        seed,
        max_epochs: 20,
        ..Default::default()
    };
    cfg.adam.lr = 0.01;
    let uniform = GatingParams::uniform(3, cfg.d, state.d_in());
    let before = evaluate_heldout(&uniform, &state, agents, &ho, cfg.m).unwrap();
    let (params, _) = train_prepared(&tr, &ho, &state, agents, &cfg, Hooks::default()).unwrap();
    let after = evaluate_heldout(&params, &state, agents, &ho, cfg.m).unwrap();
    let sim = Simulator::new(&params, &state, agents, &emb, SimConfig::default()).unwrap();
    let contexts = ds.contexts();
    let mut memo = HashMap::new();
    let mut freq = [0.0; 3];
    let draws = 10_000u64;
    for i in 0..draws {
        let c = &contexts[(derive_seed(seed, i) % contexts.len() as u64) as usize];
        let g = memo.entry(c.clone()).or_insert_with(|| sim.gates_at(c).unwrap());
        let (k, _) = sim.sample_latent(g, derive_seed(seed + 7, i), None).unwrap();
        freq[majority[k]] += 1.0 / draws as f64;
    }
    let l1: f64 = freq.iter().zip(&pi_star).map(|(a, b)| (a - b).abs()).sum();
    let gain = after - before;
    let secs = start.elapsed().as_secs_f64();
    check(
        gain >= 0.05 && l1 <= 0.15 && secs < 300.0,
        format!(
            "heldout gain {gain:.3} nats/record, persona frequencies [{:.3}, {:.3}, {:.3}] L1 {l1:.3}, {secs:.1}s",
            freq[0], freq[1], freq[2]
        ),
    )
}

fn gaussian(n: usize, mean: &[f64], sd: &[f64], seed: u64) -> Matrix {
    let mut x = random_matrix(n, mean.len(), seed);
    for i in 0..n {
        for (c, v) in x.row_mut(i).iter_mut().enumerate() {
            *v = mean[c] + sd[c] * *v;
        }
    }
    x
}

fn criterion_4() -> Outcome {
    let mut failures = Vec::new();
    let mut note = |ok: bool, what: String| {
        if !ok {
            failures.push(what);
        }
    };
    let x = random_matrix(500, 6, 1);
    let self_fid = fid(&x, &x).unwrap();
    note(self_fid <= 1e-6, format!("fid(X,X) {self_fid:.1e}"));

    // diagonal Gaussians: squared mean gap plus sum of (sd1 - sd2)^2
    let cases: [(&[f64], &[f64], &[f64], &[f64]); 2] = [
        (&[0.0], &[1.0], &[1.0], &[1.0]),
        (&[0.0, 0.0, 0.0, 0.0], &[1.0, 1.5, 2.0, 0.5], &[1.0, -1.0, 0.5, 0.0], &[2.0, 1.0, 1.0, 1.5]),
    ];
    for (i, (m1, s1, m2, s2)) in cases.iter().enumerate() {
        let want: f64 = m1.iter().zip(*m2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            + s1.iter().zip(*s2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let got = fid(&gaussian(5000, m1, s1, 10 + i as u64), &gaussian(5000, m2, s2, 20 + i as u64)).unwrap();
        note((got - want).abs() <= 0.1 * want, format!("gaussian d={} fid {got:.3} vs {want:.3}", m1.len()));
    }

    let mcfg = MauveConfig {
        n_clusters: 50,
        scaling: 5.0,
        ..Default::default()
    };
    let same = mauve(&random_matrix(2000, 4, 30), &random_matrix(2000, 4, 31), &mcfg).unwrap();
    note(same >= 0.99, format!("mauve same {same:.3}"));
    let blobs = mauve(
        &gaussian(2000, &[0.0; 4], &[1.0; 4], 32),
        &gaussian(2000, &[50.0, 0.0, 0.0, 0.0], &[1.0; 4], 33),
        &mcfg,
    )
    .unwrap();
    note(blobs <= 0.05, format!("mauve disjoint {blobs:.3}"));

    let kcfg = KlCosineConfig::default();
    let y = gaussian(500, &[0.5; 6], &[1.0, 2.0, 1.0, 0.5, 1.0, 1.0], 2);
    let kl_self = kl_cosine(&x, &x, &kcfg).unwrap();
    note(kl_self <= 1e-12, format!("kl_cosine(X,X) {kl_self:.1e}"));

    let q = random_rotation(6, 3);
    let (xr, yr) = (rotate(&x, &q), rotate(&y, &q));
    let f = fid(&x, &y).unwrap();
    let fr = fid(&xr, &yr).unwrap();
    note((f - fr).abs() <= 1e-6 * (1.0 + f), format!("fid rotation {f} vs {fr}"));
    let fs = fid(&y, &x).unwrap();
    note((f - fs).abs() <= 1e-8 * (1.0 + f), format!("fid symmetry {f} vs {fs}"));
    let k = kl_cosine(&x, &y, &kcfg).unwrap();
    let kr = kl_cosine(&xr, &yr, &kcfg).unwrap();
    note((k - kr).abs() <= 1e-10, format!("kl_cosine rotation {k} vs {kr}"));
    let small = MauveConfig {
        n_clusters: 20,
        scaling: 5.0,
        ..Default::default()
    };
    let a = mauve(&gaussian(800, &[0.0; 3], &[1.0; 3], 4), &gaussian(800, &[0.7, 0.0, 0.0], &[1.0; 3], 5), &small).unwrap();
    let b = mauve(&gaussian(800, &[0.7, 0.0, 0.0], &[1.0; 3], 5), &gaussian(800, &[0.0; 3], &[1.0; 3], 4), &small).unwrap();
    note((a - b).abs() <= 0.01, format!("mauve symmetry {a:.3} vs {b:.3}"));

    let summary = format!(
        "fid(X,X) {self_fid:.1e}, mauve same {same:.3} disjoint {blobs:.3}, kl(X,X) {kl_self:.1e}"
    );
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; failed: {}", failures.join(", ")))
    }
}

fn criterion_5() -> Outcome {
    let inst = Instance::new(3, 5, 1, 16, 1);
    let params = inst.params(4, 6.0, 1);
    let lm = Recorder::new("x");
    let agents = Agents::new(&inst.personas, &inst.pool, &inst.templates, &lm);
    let sim = Simulator::new(&params, &inst.state, agents, &inst.embedder, SimConfig::default()).unwrap();
    let g = sim.gates_at("goal rain").unwrap();
    let draws = 50_000u64;
    let mut freq = [0.0; 15];
    for i in 0..draws {
        let (c, h) = sim.sample_latent(&g, i, None).unwrap();
        freq[c * 5 + h] += 1.0 / draws as f64;
    }
    let mut tv = 0.0;
    for k in 0..3 {
        for j in 0..5 {
            tv += (freq[k * 5 + j] - g.pi[k] * g.omega[(k, j)]).abs();
        }
    }
    tv *= 0.5;
    check(tv <= 0.05, format!("total variation {tv:.4} over {draws} draws"))
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/mini")
}

fn mop(out: &Path, args: &[&str]) -> Result<String, String> {
    let config = fixture_dir().join("config.json");
    let output = Command::new(env!("CARGO_BIN_EXE_mop"))
        .arg("--config")
        .arg(&config)
        .arg("--output-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!("mop {} failed: {}", args.join(" "), String::from_utf8_lossy(&output.stderr)));
    }
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

fn pipeline(out: &Path) -> Result<(f64, f64, f64, f64), String> {
    mop(out, &["synth-personas"])?;
    mop(out, &["train"])?;
    mop(out, &["generate", "--count", "500"])?;
    let zero = out.join("zero_shot.jsonl");
    mop(out, &["generate", "--count", "500", "--zero-shot", "--out", zero.to_str().unwrap()])?;
    let scores = |stdout: String| -> Result<(f64, f64), String> {
        let v: serde_json::Value = serde_json::from_str(&stdout).map_err(|e| e.to_string())?;
        Ok((v["fid"].as_f64().unwrap_or(f64::NAN), v["kl_cosine"].as_f64().unwrap_or(f64::NAN)))
    };
    let (f_mop, k_mop) = scores(mop(out, &["evaluate"])?)?;
    let zero_report = out.join("zero_shot_eval.json");
    let (f_zero, k_zero) = scores(mop(
        out,
        &["evaluate", "--generated", zero.to_str().unwrap(), "--out", zero_report.to_str().unwrap()],
    )?)?;
    Ok((f_mop, k_mop, f_zero, k_zero))
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn criterion_6_and_7() -> (Outcome, Outcome) {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let start = Instant::now();
    let first = pipeline(&out);
    let secs = start.elapsed().as_secs_f64();
    let c6 = match first {
        Err(e) => Err(e),
        Ok((f_mop, k_mop, f_zero, k_zero)) => check(
            f_mop < f_zero && k_mop < k_zero && secs < 600.0,
            format!(
                "fid {f_mop:.4} vs zero-shot {f_zero:.4}, kl_cosine {k_mop:.4} vs zero-shot {k_zero:.4}, {secs:.1}s"
            ),
        ),
    };
    let before = snapshot(&out);
    let c7 = pipeline(&out).and_then(|_| {
        let after = snapshot(&out);
        let differing: Vec<String> = before
            .keys()
            .chain(after.keys())
            .filter(|k| before.get(*k) != after.get(*k))
            .map(|k| k.display().to_string())
            .collect();
        check(
            differing.is_empty() && !before.is_empty(),
            if differing.is_empty() {
                format!("{} files byte-identical across reruns", before.len())
            } else {
                format!("differing files: {}", differing.join(", "))
            },
        )
    });
    (c6, c7)
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let (c6, c7) = criterion_6_and_7();
    let results = [
        ("1 gradient correctness", criterion_1()),
        ("2 sparse-gate exactness", criterion_2()),
        ("3 population recovery", criterion_3()),
        ("4 metric suite", criterion_4()),
        ("5 sampler fidelity", criterion_5()),
        ("6 end-to-end CLI", c6),
        ("7 determinism", c7),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS criterion {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
}
