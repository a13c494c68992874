//! The five subcommands. Every command writes a manifest naming its inputs,
//! outputs (with hashes), seeds and counts; nothing time-dependent goes into
//! any output file.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mop_core::corpus::{
    sample_exemplar_pool, split_dataset, validate_personas, Dataset, Example, ExemplarPool, Persona,
};
use mop_core::embed::{Embedder, EmbedderFingerprint};
use mop_core::gating::{gates, Agents, GateState, GatingParams, Projected};
use mop_core::lm::LanguageModel;
use mop_core::metrics::{detail_csv, evaluate};
use mop_core::persona::{label_persona, synthesize_personas};
use mop_core::prompt::TaskTemplates;
use mop_core::rng::derive_seed;
use mop_core::simulate::{ContextSource, LabelMode, Simulator};
use mop_core::train::{train_prepared, Hooks, Prepared};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Expected};
use crate::cli::{Cli, Command, EvaluateArgs, GenerateArgs, InspectArgs, SynthArgs, TrainArgs};
use crate::config::{open_backend, open_embedder, resolve, Backend, ContextsSpec, RunConfig};
use crate::error::{CliError, CliResult};
use crate::io::{
    load_personas, load_pool, load_records, load_texts, read_versioned, save_personas, save_pool, sha256_hex,
    to_json, write_generations, write_versioned, FORMAT_VERSION,
};

pub const PERSONAS_FILE: &str = "personas.json";
pub const CLUSTER_REPORT_FILE: &str = "cluster_report.json";
pub const POOL_FILE: &str = "pool.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub mop_version: &'static str,
    pub format_version: u32,
    pub config: RunConfig,
    /// Role to SHA-256 of the file read.
    pub inputs: BTreeMap<String, String>,
    /// File name (relative to the output directory when inside it) to
    /// SHA-256 of the content written.
    pub outputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub counts: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedder: Option<EmbedderFingerprint>,
}

impl Manifest {
    fn new(command: &'static str, config: &RunConfig) -> Self {
        Manifest {
            command,
            mop_version: env!("CARGO_PKG_VERSION"),
            format_version: FORMAT_VERSION,
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seeds: BTreeMap::new(),
            counts: BTreeMap::new(),
            backend: None,
            embedder: None,
        }
    }
}

/// Loaded configuration plus where its relative paths point.
pub struct Run {
    pub config: RunConfig,
    base: PathBuf,
    out_dir: PathBuf,
}

impl Run {
    pub fn new(config: RunConfig, base: PathBuf, output_dir: Option<PathBuf>) -> CliResult<Self> {
        let mut config = config;
        if let Some(o) = output_dir {
            config.output_dir = o;
        }
        let out_dir = match &config.output_dir {
            p if p.is_absolute() => p.clone(),
            p if base.as_os_str().is_empty() => p.clone(),
            p => base.join(p),
        };
        Ok(Run { config, base, out_dir })
    }

    fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.base, p)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn label(&self, p: &Path) -> String {
        p.strip_prefix(&self.out_dir)
            .map(|r| r.display().to_string())
            .unwrap_or_else(|_| p.display().to_string())
    }

    fn read_input(&self, m: &mut Manifest, role: &str, p: &Path) -> CliResult<String> {
        let text = read_versioned(p)?;
        m.inputs.insert(role.to_string(), sha256_hex(text.as_bytes()));
        Ok(text)
    }

    fn write_output(&self, m: &mut Manifest, p: &Path, content: &str) -> CliResult<()> {
        write_versioned(p, content)?;
        m.outputs.insert(self.label(p), sha256_hex(content.as_bytes()));
        Ok(())
    }

    fn finish(&self, m: &Manifest, name: &str) -> CliResult<()> {
        let p = self.out(name);
        write_versioned(&p, &to_json(m))?;
        log::info!("manifest written to {}", p.display());
        Ok(())
    }

    fn records(&self, m: &mut Manifest) -> CliResult<Dataset> {
        let p = self.path(&self.config.records);
        self.read_input(m, "records", &p)?;
        load_records(&p)
    }

    fn personas(&self, m: &mut Manifest, flag: Option<&PathBuf>) -> CliResult<Vec<Persona>> {
        let p = flag.cloned().unwrap_or_else(|| self.out(PERSONAS_FILE));
        let personas = load_personas(&p)?;
        validate_personas(&personas)?;
        m.inputs.insert("personas".into(), sha256_hex(read_versioned(&p)?.as_bytes()));
        Ok(personas)
    }

    fn pool(&self, m: &mut Manifest, flag: Option<&PathBuf>) -> CliResult<ExemplarPool> {
        let p = flag.cloned().unwrap_or_else(|| self.out(POOL_FILE));
        let pool = load_pool(&p)?;
        m.inputs.insert("pool".into(), sha256_hex(read_versioned(&p)?.as_bytes()));
        Ok(pool)
    }

    fn checkpoint(&self, m: &mut Manifest, flag: Option<&PathBuf>) -> CliResult<Checkpoint> {
        let p = flag.cloned().unwrap_or_else(|| self.out(CHECKPOINT_FILE));
        let c = Checkpoint::load(&p)?;
        m.inputs.insert("checkpoint".into(), sha256_hex(read_versioned(&p)?.as_bytes()));
        Ok(c)
    }
}

type Emb = Box<dyn Embedder + Send + Sync>;

fn tools(run: &Run, m: &mut Manifest) -> CliResult<(Backend, Emb)> {
    let backend = open_backend(&run.config.backend, &run.base)?;
    let embedder = open_embedder(&run.config.embedder)?;
    m.backend = Some(backend.fingerprint());
    m.embedder = Some(embedder.fingerprint());
    Ok((backend, embedder))
}

pub fn run(cli: Cli) -> CliResult<()> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Invalid("a --config file is required".into()))?;
    let (mut config, base) = RunConfig::load(&path)?;
    match &cli.command {
        Command::SynthPersonas(a) => {
            set(&mut config.synth.k, a.k);
            set(&mut config.synth.seed, a.seed);
        }
        Command::Train(a) => {
            set(&mut config.train.m, a.m);
            set(&mut config.pool_size, a.n);
            set(&mut config.train.seed, a.seed);
            set(&mut config.train.max_epochs, a.epochs);
            set(&mut config.train.adam.lr, a.lr);
        }
        Command::Generate(a) => {
            set(&mut config.generate.count, a.count);
            set(&mut config.generate.seed, a.seed);
            if let Some(l) = &a.sentiment {
                config.generate.label = Some(LabelMode::Sentiment(l.clone()));
            }
            if let Some(l) = &a.topic {
                config.generate.label = Some(LabelMode::Topic(l.clone()));
            }
            if a.mix.is_some() {
                config.generate.mix = a.mix;
            }
        }
        Command::Evaluate(_) | Command::Inspect(_) => {}
    }
    config.validate()?;
    let run = Run::new(config, base, cli.output_dir)?;
    match &cli.command {
        Command::SynthPersonas(a) => synth_personas(&run, a),
        Command::Train(a) => train(&run, a),
        Command::Generate(a) => generate(&run, a),
        Command::Evaluate(a) => evaluate_cmd(&run, a),
        Command::Inspect(a) => inspect(&run, a),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

pub fn synth_personas(run: &Run, args: &SynthArgs) -> CliResult<()> {
    let cfg = &run.config;
    let mut m = Manifest::new("synth-personas", cfg);
    let templates = cfg.templates()?;
    let ds = run.records(&mut m)?;
    let (backend, embedder) = tools(run, &mut m)?;
    log::info!("clustering {} records into {} personas", ds.len(), cfg.synth.k);
    let (mut personas, _, report) =
        synthesize_personas(&ds.training_view(), &*embedder, &backend, &templates, &cfg.synth)?;
    if templates.classify.is_some() && !templates.labels.is_empty() {
        for p in &mut personas {
            let seed = derive_seed(cfg.synth.seed, 20_000 + p.id as u64);
            p.label = Some(label_persona(&p.description, &backend, &templates, seed)?);
        }
    }
    if !report.stub_personas.is_empty() {
        log::warn!("{} personas fell back to stub descriptions", report.stub_personas.len());
    }
    let out = args.out.clone().unwrap_or_else(|| run.out(PERSONAS_FILE));
    save_personas(&out, &personas)?;
    m.outputs
        .insert(run.label(&out), sha256_hex(read_versioned(&out)?.as_bytes()));
    run.write_output(&mut m, &run.out(CLUSTER_REPORT_FILE), &to_json(&report))?;
    m.seeds.insert("synth".into(), cfg.synth.seed);
    m.counts.insert("records".into(), ds.len());
    m.counts.insert("personas".into(), personas.len());
    run.finish(&m, "synth_manifest.json")
}

pub fn train(run: &Run, args: &TrainArgs) -> CliResult<()> {
    let cfg = &run.config;
    let tc = &cfg.train;
    let mut m = Manifest::new("train", cfg);
    let templates = cfg.templates()?;
    let personas = run.personas(&mut m, args.personas.as_ref())?;
    let ds = run.records(&mut m)?;
    let (backend, embedder) = tools(run, &mut m)?;

    let (tr, ho) = split_dataset(&ds, tc.heldout_fraction, derive_seed(tc.seed, 0x5eed))?;
    let pool = sample_exemplar_pool(&tr, cfg.pool_size, derive_seed(tc.seed, 0x900d))?;
    let state = GateState::build(&*embedder, &personas, &pool, tc.exemplar_text)?;
    let train_set = Prepared::new(&*embedder, tr.training_view())?;
    let heldout = Prepared::new(&*embedder, ho.training_view())?;
    log::info!(
        "training K={} N={} M={} on {} records, {} heldout",
        personas.len(),
        pool.len(),
        tc.m,
        train_set.len(),
        heldout.len()
    );

    let agents = Agents::new(&personas, &pool, &templates, &backend);
    let fingerprint = backend.fingerprint();
    let snapshot = |params: &GatingParams, epoch: usize, held: f64| {
        Checkpoint::new(
            params.clone(),
            state.clone(),
            tc.exemplar_text,
            tc.m,
            epoch,
            held,
            &personas,
            &pool,
            fingerprint.clone(),
        )
    };
    let failure: RefCell<Option<CliError>> = RefCell::new(None);
    let written: RefCell<Vec<(String, String)>> = RefCell::new(Vec::new());
    let start = Instant::now();
    let hooks = Hooks {
        clock: Some(Box::new(move || start.elapsed().as_secs_f64())),
        on_epoch: Some(Box::new(|log, params, best| {
            log::info!(
                "epoch {:>3}  train {:>10.4}  heldout {:>10.4}  tau {:.3}  calls {}  hits {}  {:.1}s{}",
                log.epoch,
                log.train_loglik.unwrap_or(f64::NAN),
                log.heldout_loglik,
                log.tau_mean,
                log.score_calls,
                log.cache_hits,
                log.wall_time_s,
                if best { "  *" } else { "" }
            );
            if best {
                let name = format!("checkpoints/epoch-{:03}.json", log.epoch);
                let text = to_json(&snapshot(params, log.epoch, log.heldout_loglik));
                if let Err(e) = write_versioned(&run.out(&name), &text) {
                    *failure.borrow_mut() = Some(e);
                    return Err(mop_core::Error::validation("could not write checkpoint"));
                }
                written.borrow_mut().push((name, sha256_hex(text.as_bytes())));
            }
            Ok(())
        })),
    };
    let result = train_prepared(&train_set, &heldout, &state, agents, tc, hooks);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let (params, log) = result?;
    m.outputs.extend(written.into_inner());

    let gain = log.best_heldout_loglik - log.initial().heldout_loglik;
    log::info!(
        "best epoch {} heldout {:.4} ({gain:+.4} nats/record over initialization)",
        log.best_epoch,
        log.best_heldout_loglik
    );
    let pool_path = run.out(POOL_FILE);
    save_pool(&pool_path, &pool)?;
    m.outputs
        .insert(run.label(&pool_path), sha256_hex(read_versioned(&pool_path)?.as_bytes()));
    let final_ckpt = snapshot(&params, log.best_epoch, log.best_heldout_loglik);
    run.write_output(&mut m, &run.out(CHECKPOINT_FILE), &to_json(&final_ckpt))?;
    run.write_output(&mut m, &run.out(TRAIN_REPORT_FILE), &to_json(&log))?;
    m.seeds.insert("train".into(), tc.seed);
    m.seeds.insert("split".into(), derive_seed(tc.seed, 0x5eed));
    m.seeds.insert("pool".into(), derive_seed(tc.seed, 0x900d));
    m.counts.insert("train_records".into(), train_set.len());
    m.counts.insert("heldout_records".into(), heldout.len());
    m.counts.insert("personas".into(), personas.len());
    m.counts.insert("exemplars".into(), pool.len());
    m.counts.insert("epochs".into(), log.epochs.len() - 1);
    run.finish(&m, "train_manifest.json")
}

/// One empty persona and one empty exemplar under uniform gates.
fn zero_shot_agents(d: usize, d_in: usize) -> CliResult<(Vec<Persona>, ExemplarPool, GatingParams)> {
    let persona = Persona::user_defined(0, "");
    let pool = ExemplarPool::new(vec![Example {
        id: "zero-shot".into(),
        context: String::new(),
        response: String::new(),
    }])?;
    Ok((vec![persona], pool, GatingParams::uniform(1, d, d_in)))
}

pub fn generate(run: &Run, args: &GenerateArgs) -> CliResult<()> {
    let cfg = &run.config;
    let g = &cfg.generate;
    let mut m = Manifest::new("generate", cfg);
    let templates = cfg.templates()?;
    let (backend, embedder) = tools(run, &mut m)?;

    let (personas, pool, params, state) = if args.zero_shot {
        let (personas, pool, params) = zero_shot_agents(cfg.train.d, embedder.dim())?;
        let state = GateState::build(&*embedder, &personas, &pool, cfg.train.exemplar_text)?;
        (personas, pool, params, state)
    } else {
        let personas = run.personas(&mut m, args.personas.as_ref())?;
        let pool = run.pool(&mut m, args.pool.as_ref())?;
        let ckpt = run.checkpoint(&mut m, args.checkpoint.as_ref())?;
        let fp = embedder.fingerprint();
        let fingerprint = backend.fingerprint();
        let expected = Expected {
            personas: &personas,
            pool: &pool,
            embedder: &fp,
            backend: &fingerprint,
        };
        ckpt.verify(&expected, args.force)?;
        (personas, pool, ckpt.params, ckpt.gate_state)
    };

    let source = contexts(run, &mut m, &templates)?;
    let agents = Agents::new(&personas, &pool, &templates, &backend);
    let sim = Simulator::new(&params, &state, agents, &*embedder, cfg.sim.clone())?;
    log::info!("generating {} responses", g.count);
    let recs = sim.simulate(&source, g.count, g.seed, g.label.as_ref(), g.mix)?;

    let out = args.out.clone().unwrap_or_else(|| run.out(GENERATIONS_FILE));
    run.write_output(&mut m, &out, &write_generations(&recs))?;
    m.seeds.insert("generate".into(), g.seed);
    m.counts.insert("generations".into(), recs.len());
    m.counts.insert("personas".into(), personas.len());
    m.counts.insert("exemplars".into(), pool.len());
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    run.finish(&m, &format!("{stem}_manifest.json"))
}

fn contexts(run: &Run, m: &mut Manifest, templates: &TaskTemplates) -> CliResult<ContextSource> {
    let g = &run.config.generate;
    let list = match &g.contexts {
        _ if !templates.uses_context() => return Ok(ContextSource::Empty),
        ContextsSpec::Empty => return Ok(ContextSource::Empty),
        ContextsSpec::Records => run.records(m)?.contexts(),
        ContextsSpec::List(v) => v.clone(),
    };
    Ok(if g.sample_contexts {
        ContextSource::Sample(list)
    } else {
        ContextSource::Cycle(list)
    })
}

pub fn evaluate_cmd(run: &Run, args: &EvaluateArgs) -> CliResult<()> {
    let cfg = &run.config;
    let mut m = Manifest::new("evaluate", cfg);
    let generated_path = args.generated.clone().unwrap_or_else(|| run.out(GENERATIONS_FILE));
    let golden_path = match (&args.golden, &cfg.golden) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => run.path(p),
        (None, None) => return Err(CliError::Invalid("no golden set: pass --golden or set `golden`".into())),
    };
    run.read_input(&mut m, "generated", &generated_path)?;
    run.read_input(&mut m, "golden", &golden_path)?;
    let generated = load_texts(&generated_path)?;
    let golden = load_texts(&golden_path)?;
    let embedder = open_embedder(&cfg.embedder)?;
    m.embedder = Some(embedder.fingerprint());
    let (report, detail) = evaluate(&generated, &golden, &*embedder, &cfg.metrics)?;
    log::info!(
        "fid {:.6}  mauve {:.4}  kl_cosine {:.6}",
        report.fid,
        report.mauve,
        report.kl_cosine
    );
    let out = args.out.clone().unwrap_or_else(|| run.out(EVAL_REPORT_FILE));
    let report_json = to_json(&report);
    run.write_output(&mut m, &out, &report_json)?;
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let csv = out.with_file_name(format!("{stem}_mauve_frontier.csv"));
    run.write_output(&mut m, &csv, &detail_csv(&detail))?;
    m.seeds.insert("mauve".into(), cfg.metrics.mauve.seed);
    m.seeds.insert("kl_cosine".into(), cfg.metrics.kl_cosine.seed);
    m.counts.insert("generated".into(), generated.len());
    m.counts.insert("golden".into(), golden.len());
    run.finish(&m, &format!("{stem}_manifest.json"))?;
    print!("{report_json}");
    Ok(())
}

/// `kind,persona,exemplar,value` rows: one `pi` row per persona, one `omega`
/// row per persona-exemplar pair, one `tau` row per persona.
pub fn gate_csv(params: &GatingParams, state: &GateState, x: &[f64]) -> CliResult<String> {
    let g = gates(x, params, &Projected::new(params, state)?)?;
    let mut s = String::from("kind,persona,exemplar,value\n");
    for (k, p) in g.pi.iter().enumerate() {
        writeln!(s, "pi,{k},,{p}").expect("string write");
    }
    for k in 0..g.omega.rows() {
        for (j, w) in g.omega.row(k).iter().enumerate() {
            writeln!(s, "omega,{k},{j},{w}").expect("string write");
        }
    }
    for (k, t) in params.taus().iter().enumerate() {
        writeln!(s, "tau,{k},,{t}").expect("string write");
    }
    Ok(s)
}

pub fn inspect(run: &Run, args: &InspectArgs) -> CliResult<()> {
    let cfg = &run.config;
    let mut m = Manifest::new("inspect", cfg);
    let personas = run.personas(&mut m, args.personas.as_ref())?;
    let pool = run.pool(&mut m, args.pool.as_ref())?;
    let ckpt = run.checkpoint(&mut m, args.checkpoint.as_ref())?;
    let embedder = open_embedder(&cfg.embedder)?;
    let fp = embedder.fingerprint();
    // the backend is not needed to evaluate gates
    let expected = Expected {
        personas: &personas,
        pool: &pool,
        embedder: &fp,
        backend: &ckpt.backend,
    };
    ckpt.verify(&expected, args.force)?;
    let csv = gate_csv(&ckpt.params, &ckpt.gate_state, &embedder.embed(&args.context)?)?;
    match &args.out {
        Some(p) => write_versioned(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
