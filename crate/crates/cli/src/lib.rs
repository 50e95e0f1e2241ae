//! Command-line driver: every command prints one JSON document on stdout, or
//! a `{code, message}` error with a non-zero exit status.

mod args;
pub mod config;
pub mod serve;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use trialign_core::datamodel::{load_manifest_opts, write_manifest, Dataset, LoadOptions, MeshSampling, PointStorage};
use trialign_core::encoder::{load_checkpoint, save_checkpoint, ModelState};
use trialign_core::evalkit::{
    class_embeddings, class_prompts_from_cache, default_templates, evaluate_zero_shot, linear_probe, ClassEmbeddingSet,
    EvalReport, ProbeConfig,
};
use trialign_core::retrieval::{
    build_index, JointQueryRequest, QueryRequest, QueryService, QueryTarget, RetrievalIndex, ServiceError, TargetSpec,
};
use trialign_core::seed::derive_seed;
use trialign_core::synthetic::SyntheticWorld;
use trialign_core::trainer::{embed_records, initial_state, train_from};

pub use args::{Cli, Command};
pub use config::CliConfig;

type CmdResult<T = Option<Value>> = Result<T, ServiceError>;

fn core(e: trialign_core::Error) -> ServiceError {
    e.into()
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> ServiceError + '_ {
    move |e| ServiceError::new("io", format!("{}: {e}", path.display()))
}

fn missing(what: &str, flag: &str) -> ServiceError {
    ServiceError::new(
        "invalid_config",
        format!(
            "{what} is required (--{flag} or `paths.{}` in the config)",
            flag.replace('-', "_")
        ),
    )
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<T> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| ServiceError::new("parse", format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CmdResult<()> {
    let text = serde_json::to_string_pretty(value).unwrap();
    std::fs::write(path, text + "\n").map_err(io(path))
}

/// Flags merged over the configuration file.
struct Ctx {
    cfg: CliConfig,
}

impl Ctx {
    fn new(cli: &Cli) -> CmdResult<Self> {
        let mut cfg = match &cli.config {
            Some(p) => CliConfig::load(p)?,
            None => CliConfig::default(),
        };
        let paths = &mut cfg.paths;
        for (flag, slot) in [
            (&cli.manifest, &mut paths.manifest),
            (&cli.cache, &mut paths.cache),
            (&cli.checkpoint, &mut paths.checkpoint),
            (&cli.index, &mut paths.index),
            (&cli.out, &mut paths.out),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if cli.seed.is_some() {
            cfg.seed = cli.seed;
        }
        Ok(Self { cfg })
    }

    fn seed(&self) -> u64 {
        self.cfg.seed.unwrap_or(0)
    }

    fn path(&self, p: &Option<PathBuf>, what: &str, flag: &str) -> CmdResult<PathBuf> {
        p.clone().ok_or_else(|| missing(what, flag))
    }

    fn dataset(&self, manifest: &Path, meshes: Option<MeshSampling>) -> CmdResult<Dataset> {
        let opts = LoadOptions {
            meshes,
            cache: self.cfg.paths.cache.clone(),
        };
        log::info!("loading {}", manifest.display());
        load_manifest_opts(manifest, &opts).map_err(core)
    }

    fn manifest(&self) -> CmdResult<Dataset> {
        let p = self.path(&self.cfg.paths.manifest, "a manifest", "manifest")?;
        self.dataset(&p, None)
    }

    fn model(&self) -> CmdResult<ModelState> {
        let p = self.path(&self.cfg.paths.checkpoint, "a checkpoint", "checkpoint")?;
        load_checkpoint(&p).map_err(core)
    }
}

pub fn run(cli: Cli) -> CmdResult {
    let ctx = Ctx::new(&cli)?;
    match cli.command {
        Command::Synth => synth(&ctx),
        Command::Prepare {
            sidecar_dir,
            num_points,
        } => prepare(&ctx, sidecar_dir, num_points),
        Command::Train => train(&ctx),
        Command::Eval {
            templates,
            class_vectors,
        } => eval(&ctx, templates, class_vectors),
        Command::Probe { test_manifest, shots } => probe(&ctx, test_manifest, shots),
        Command::Index { vectors } => index(&ctx, vectors),
        Command::Retrieve { k, joint, targets } => retrieve(&ctx, k, joint, &targets),
        Command::Serve { addr } => {
            let service = QueryService::new(load_index(&ctx)?, optional_model(&ctx)?);
            serve::run(service, addr.as_deref().unwrap_or(&ctx.cfg.serve.addr))?;
            Ok(None)
        }
    }
}

fn out_dir(ctx: &Ctx) -> CmdResult<PathBuf> {
    let dir = ctx.path(&ctx.cfg.paths.out, "an output directory", "out")?;
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    dir.canonicalize().map_err(io(&dir))
}

fn synth(ctx: &Ctx) -> CmdResult {
    let s = &ctx.cfg.synth;
    let dir = out_dir(ctx)?;
    let world = SyntheticWorld::new(s.world.clone(), derive_seed(ctx.seed(), "world")).map_err(core)?;
    let mut written = BTreeMap::new();
    for (name, per_class) in [("train", s.train_per_class), ("test", s.test_per_class)] {
        let mut data = world
            .balanced(per_class, &format!("{name}-"), derive_seed(ctx.seed(), name))
            .map_err(core)?;
        let cache = dir.join(format!("{name}_cache.bin"));
        data.cache.write(&cache).map_err(core)?;
        data.manifest.cache_path = cache;
        let manifest = dir.join(format!("{name}.jsonl"));
        write_manifest(&data.manifest, &manifest, &PointStorage::Inline).map_err(core)?;
        written.insert(
            name,
            json!({ "manifest": manifest, "shapes": data.manifest.records.len() }),
        );
    }
    let templates = dir.join("templates.txt");
    std::fs::write(&templates, world.templates().join("\n") + "\n").map_err(io(&templates))?;
    Ok(Some(
        json!({ "labels": world.labels, "datasets": written, "templates": templates }),
    ))
}

fn prepare(ctx: &Ctx, sidecar_dir: Option<PathBuf>, num_points: Option<usize>) -> CmdResult {
    let input = ctx.path(&ctx.cfg.paths.manifest, "an input manifest", "manifest")?;
    let out = ctx.path(&ctx.cfg.paths.out, "an output manifest path", "out")?;
    let sampling = MeshSampling {
        num_points: num_points.or(ctx.cfg.prepare.num_points),
        seed: ctx.seed(),
    };
    let mut data = ctx.dataset(&input, Some(sampling))?;
    let parent = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(io(parent))?;
    let out = parent
        .canonicalize()
        .map_err(io(parent))?
        .join(out.file_name().unwrap_or_default());
    let cache = &data.manifest.cache_path;
    data.manifest.cache_path = cache.canonicalize().map_err(io(cache))?;
    let storage = match sidecar_dir.or_else(|| ctx.cfg.prepare.sidecar_dir.clone()) {
        Some(d) => PointStorage::Sidecar(std::path::absolute(&d).map_err(io(&d))?),
        None => PointStorage::Inline,
    };
    write_manifest(&data.manifest, &out, &storage).map_err(core)?;
    let labeled = data.manifest.split_labels.as_ref().map_or(0, BTreeMap::len);
    Ok(Some(json!({
        "manifest": out,
        "records": data.manifest.records.len(),
        "labeled": labeled,
        "text_dim": data.cache.text_dim(),
        "image_dim": data.cache.image_dim(),
    })))
}

fn train(ctx: &Ctx) -> CmdResult {
    let seed = ctx.cfg.seed.ok_or_else(|| {
        ServiceError::new(
            "invalid_config",
            "train requires a seed (--seed or `seed` in the config)",
        )
    })?;
    let mut cfg = ctx.cfg.train.clone();
    cfg.seed = seed;
    let data = ctx.manifest()?;
    let dir = out_dir(ctx)?;
    let checkpoint = ctx
        .cfg
        .paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| dir.join("checkpoint.bin"));
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = std::fs::File::create(&metrics_path).map_err(io(&metrics_path))?;
    let mut write_err = None;
    let state = initial_state(&data, &ctx.cfg.encoder, &cfg).map_err(core)?;
    let (state, report) = train_from(state, &data, &cfg, &mut |m| {
        log::info!(
            "epoch {} round {} train {:.5} val {:.5} tau {:.4}",
            m.epoch,
            m.round,
            m.train_loss,
            m.val_loss,
            m.tau
        );
        if write_err.is_none() {
            if let Err(e) = writeln!(metrics, "{}", serde_json::to_string(m).unwrap()) {
                write_err = Some(e);
            }
        }
    })
    .map_err(core)?;
    if let Some(e) = write_err {
        return Err(io(&metrics_path)(e));
    }
    save_checkpoint(&state, &checkpoint).map_err(core)?;
    let report_path = dir.join("report.json");
    write_json(&report_path, &report)?;
    Ok(Some(json!({
        "checkpoint": checkpoint,
        "report": report_path,
        "metrics": metrics_path,
        "epochs": report.epochs.len(),
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss,
        "round_switch_epoch": report.round_switch_epoch,
    })))
}

fn labels_of(data: &Dataset) -> HashMap<String, String> {
    data.manifest
        .split_labels
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect()
}

fn all_embeddings(state: &ModelState, data: &Dataset) -> CmdResult<(Vec<String>, trialign_core::linalg::Matrix)> {
    let idx: Vec<usize> = (0..data.manifest.records.len()).collect();
    let emb = embed_records(state, data, &idx).map_err(core)?;
    Ok((data.manifest.records.iter().map(|r| r.id.clone()).collect(), emb))
}

fn eval(ctx: &Ctx, templates: Option<PathBuf>, class_vectors: Option<PathBuf>) -> CmdResult {
    let state = ctx.model()?;
    let data = ctx.manifest()?;
    let truth = labels_of(&data);
    if truth.is_empty() {
        return Err(ServiceError::new(
            "missing_label",
            "the evaluation manifest has no labels",
        ));
    }
    let classes = match class_vectors.or_else(|| ctx.cfg.paths.class_vectors.clone()) {
        Some(p) => {
            let raw: BTreeMap<String, Vec<f64>> = read_json(&p)?;
            ClassEmbeddingSet::from_raw(raw.into_iter().collect()).map_err(core)?
        }
        None => {
            let labels: Vec<String> = match &ctx.cfg.eval.labels {
                Some(l) => l.clone(),
                None => truth.values().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
            };
            let text = match templates.or_else(|| ctx.cfg.paths.templates.clone()) {
                Some(p) => Some(std::fs::read_to_string(&p).map_err(io(&p))?),
                None => None,
            };
            let templates: Vec<&str> = match &text {
                Some(t) => t.lines().map(str::trim).filter(|l| !l.is_empty()).collect(),
                None => default_templates(),
            };
            let prompts = class_prompts_from_cache(&data.cache, &labels, &templates).map_err(core)?;
            class_embeddings(&prompts, &state, ctx.cfg.eval.prompt_averaging).map_err(core)?
        }
    };
    let (ids, emb) = all_embeddings(&state, &data)?;
    let name = ctx.cfg.eval.benchmark.clone().unwrap_or_else(|| {
        let m = ctx.cfg.paths.manifest.as_deref().unwrap_or(Path::new("benchmark"));
        m.file_stem().unwrap_or_default().to_string_lossy().into_owned()
    });
    let result = evaluate_zero_shot(&name, &ids, &emb, &classes, &truth).map_err(core)?;
    Ok(Some(
        serde_json::to_value(EvalReport {
            benchmarks: vec![result],
            probe: Vec::new(),
        })
        .unwrap(),
    ))
}

fn labeled_embeddings(state: &ModelState, data: &Dataset) -> CmdResult<Vec<(Vec<f64>, String)>> {
    let truth = labels_of(data);
    let (ids, emb) = all_embeddings(state, data)?;
    ids.iter()
        .enumerate()
        .map(|(i, id)| match truth.get(id) {
            Some(l) => Ok((emb.row(i).to_vec(), l.clone())),
            None => Err(ServiceError::new("missing_label", format!("no label for `{id}`"))),
        })
        .collect()
}

fn probe(ctx: &Ctx, test_manifest: Option<PathBuf>, shots: Vec<usize>) -> CmdResult {
    let state = ctx.model()?;
    let train_data = ctx.manifest()?;
    let test_path = test_manifest
        .or_else(|| ctx.cfg.paths.test_manifest.clone())
        .ok_or_else(|| missing("a test manifest", "test-manifest"))?;
    let test_data = ctx.dataset(&test_path, None)?;
    let train = labeled_embeddings(&state, &train_data)?;
    let test = labeled_embeddings(&state, &test_data)?;
    let shots = match (shots.is_empty(), ctx.cfg.eval.probe_shots.is_empty()) {
        (false, _) => shots,
        (true, false) => ctx.cfg.eval.probe_shots.clone(),
        (true, true) => vec![ctx.cfg.probe.shots],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed(), "probe"));
    let probe = shots
        .into_iter()
        .map(|s| {
            let cfg = ProbeConfig {
                shots: s,
                ..ctx.cfg.probe.clone()
            };
            linear_probe(&train, &test, &cfg, &mut rng).map_err(core)
        })
        .collect::<CmdResult<Vec<_>>>()?;
    Ok(Some(
        serde_json::to_value(EvalReport {
            benchmarks: Vec::new(),
            probe,
        })
        .unwrap(),
    ))
}

fn build(ctx: &Ctx, vectors: Option<PathBuf>) -> CmdResult<RetrievalIndex> {
    if let Some(p) = vectors {
        let raw: BTreeMap<String, Vec<f64>> = read_json(&p)?;
        return build_index(raw.into_iter().collect(), BTreeMap::new()).map_err(core);
    }
    let state = ctx.model()?;
    let data = ctx.manifest()?;
    let (ids, emb) = all_embeddings(&state, &data)?;
    let metadata = data
        .manifest
        .records
        .iter()
        .map(|r| {
            let label = data.manifest.label_of(&r.id);
            (r.id.clone(), json!({ "dataset_tag": r.dataset_tag, "label": label }))
        })
        .collect();
    let entries = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, emb.row(i).to_vec()))
        .collect();
    build_index(entries, metadata).map_err(core)
}

fn index(ctx: &Ctx, vectors: Option<PathBuf>) -> CmdResult {
    let out = match (&ctx.cfg.paths.index, &ctx.cfg.paths.out) {
        (_, Some(o)) | (Some(o), None) => o.clone(),
        (None, None) => return Err(missing("an index output path", "out")),
    };
    let index = build(ctx, vectors)?;
    index.write(&out).map_err(core)?;
    Ok(Some(json!({ "index": out, "rows": index.len(), "dim": index.dim() })))
}

fn load_index(ctx: &Ctx) -> CmdResult<RetrievalIndex> {
    let p = ctx.path(&ctx.cfg.paths.index, "an index", "index")?;
    RetrievalIndex::read(&p).map_err(core)
}

fn optional_model(ctx: &Ctx) -> CmdResult<Option<ModelState>> {
    match ctx.cfg.paths.checkpoint {
        Some(_) => ctx.model().map(Some),
        None => Ok(None),
    }
}

/// Inline JSON if it parses as a target, otherwise a path to a JSON file.
fn parse_target(arg: &str) -> CmdResult<QueryTarget> {
    let trimmed = arg.trim_start();
    if trimmed.starts_with('[') || trimmed.starts_with('{') {
        return serde_json::from_str(trimmed).map_err(|e| ServiceError::new("parse", format!("query target: {e}")));
    }
    read_json(Path::new(arg))
}

fn retrieve(ctx: &Ctx, k: usize, joint: bool, targets: &[String]) -> CmdResult {
    let service = QueryService::new(load_index(ctx)?, optional_model(ctx)?);
    let response = match (joint, targets) {
        (true, [a, b]) => service.query_joint(&JointQueryRequest {
            a: parse_target(a)?,
            b: parse_target(b)?,
            k,
        })?,
        (true, _) => return Err(ServiceError::new("usage", "--joint takes exactly two targets")),
        (false, [t]) => {
            let target = match parse_target(t)? {
                QueryTarget::Vector(v) => TargetSpec {
                    vector: Some(v),
                    ..Default::default()
                },
                QueryTarget::Spec(s) => s,
            };
            service.query(&QueryRequest { target, k })?
        }
        (false, _) => {
            return Err(ServiceError::new(
                "usage",
                "retrieve takes one target (or two with --joint)",
            ))
        }
    };
    Ok(Some(serde_json::to_value(response).unwrap()))
}
