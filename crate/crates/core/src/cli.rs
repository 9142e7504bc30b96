//! `dsplat` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::image::{psnr, ssim, Image};
use crate::opacity::{prune_plan, prune_report};
use crate::scenegen::{generate, render_dataset, OracleScene, SceneSpec};
use crate::separation::{Label, Partition, SeparationParams};
use crate::splat::render_gaussians;
use crate::train::{
    classify_oracle, fit, load_checkpoint, resume, Dataset, TrainConfig, TrainState, CHECKPOINT, PARTITION_REPORT,
    PRUNE_REPORT,
};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Scene spec written next to a checkpoint so novel views can be placed on the rig.
pub const RUN_SPEC: &str = "spec.txt";

#[derive(Parser, Debug)]
#[command(name = "dsplat", version, about = "Dynamic Gaussian splatting on the CPU")]
struct Cli {
    /// Key = value file; any flag below may also appear there.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named starting configuration: mini or paper-shape.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. 1 is the determinism baseline.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one training key, e.g. `--set lambda=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with ground truth.
    Generate,
    /// Train on a dataset (or the built-in synthetic scene) and write checkpoint and logs.
    Fit(FitArgs),
    /// Render one view at any time from a checkpoint.
    Render(RenderArgs),
    /// Run separation only and write the partition report.
    Classify(ClassifyArgs),
    /// PSNR and SSIM of every image in one directory against another.
    Eval(EvalArgs),
    /// Importance of every Gaussian in a checkpoint and what pruning would remove.
    PruneReport(PruneArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Dataset directory. Without it the synthetic scene for `--seed` is built in memory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Checkpoint file or the run directory holding it.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    view: Option<usize>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Classify the learned model in this checkpoint instead of the ground-truth motion.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

/// Keys that belong to the command line rather than the training config.
const CLI_KEYS: &[&str] = &[
    "preset",
    "threads",
    "out",
    "data",
    "resume",
    "checkpoint",
    "t",
    "view",
    "pred",
    "truth",
];

struct Resolved {
    config: TrainConfig,
    cli: BTreeMap<String, String>,
}

impl Resolved {
    fn path(&self, key: &str) -> Option<PathBuf> {
        self.cli.get(key).map(PathBuf::from)
    }

    fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| Error::Config(format!("--{key} is required (flag or config key)")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.cli
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("bad value for {key}: '{v}'")))
            })
            .transpose()
    }

    fn out(&self, default: &str) -> PathBuf {
        self.path("out").unwrap_or_else(|| PathBuf::from(default))
    }

    fn echo(&self) -> String {
        let mut s = self.config.to_text();
        for (k, v) in &self.cli {
            if k != "preset" {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }
}

fn resolve(cli: &Cli) -> Result<Resolved> {
    let mut file = BTreeMap::new();
    if let Some(p) = &cli.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        file = crate::scenegen::parse_kv(&text, &p.display().to_string())?;
    }
    let mut flags: BTreeMap<String, String> = BTreeMap::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.insert(k.to_string(), v);
        }
    };
    put("preset", cli.preset.clone());
    put("seed", cli.seed.map(|s| s.to_string()));
    put("threads", cli.threads.map(|s| s.to_string()));
    put("out", cli.out.as_ref().map(|p| p.display().to_string()));
    match &cli.command {
        Command::Fit(a) => {
            put("data", a.data.as_ref().map(|p| p.display().to_string()));
            put("resume", a.resume.as_ref().map(|p| p.display().to_string()));
        }
        Command::Render(a) => {
            put("checkpoint", a.checkpoint.as_ref().map(|p| p.display().to_string()));
            put("t", a.t.map(|v| v.to_string()));
            put("view", a.view.map(|v| v.to_string()));
        }
        Command::Classify(a) => {
            put("data", a.data.as_ref().map(|p| p.display().to_string()));
            put("checkpoint", a.checkpoint.as_ref().map(|p| p.display().to_string()));
        }
        Command::Eval(a) => {
            put("pred", a.pred.as_ref().map(|p| p.display().to_string()));
            put("truth", a.truth.as_ref().map(|p| p.display().to_string()));
        }
        Command::PruneReport(a) => {
            put("checkpoint", a.checkpoint.as_ref().map(|p| p.display().to_string()));
            put("data", a.data.as_ref().map(|p| p.display().to_string()));
        }
        Command::Generate => {}
    }
    for kv in &cli.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        flags.insert(k.trim().to_string(), v.trim().to_string());
    }

    // flags override the file
    let mut merged = file;
    merged.extend(flags);
    let preset = merged.get("preset").cloned().unwrap_or_else(|| "mini".to_string());
    let mut config = TrainConfig::preset(&preset)?;
    let mut rest = BTreeMap::new();
    for (k, v) in merged {
        if CLI_KEYS.contains(&k.as_str()) {
            rest.insert(k, v);
        } else {
            config.set(&k, &v)?;
        }
    }
    config.validate()?;
    Ok(Resolved { config, cli: rest })
}

fn checkpoint_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT)
    } else {
        p.to_path_buf()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The dataset under `data`, or the synthetic scene for `seed` built in memory.
fn load_data(r: &Resolved) -> Result<(Dataset, Option<OracleScene>)> {
    match r.path("data") {
        Some(dir) => Ok((Dataset::load(&dir)?, None)),
        None => {
            let scene = generate(&SceneSpec::mini(r.config.seed))?;
            Ok((Dataset::from_oracle(&scene)?, Some(scene)))
        }
    }
}

fn cmd_generate(r: &Resolved) -> Result<()> {
    let out = r.out("data");
    let scene = generate(&SceneSpec::mini(r.config.seed))?;
    render_dataset(&scene, &out)?;
    println!(
        "wrote {} views x {} frames ({} gaussians, {} dynamic) to {}",
        scene.spec.rig.n_views,
        scene.spec.rig.n_frames,
        scene.canonical.len(),
        scene.spec.n_dynamic,
        out.display()
    );
    Ok(())
}

fn cmd_fit(r: &Resolved) -> Result<()> {
    let out = r.out("run");
    let (data, _) = load_data(r)?;
    let state = match r.path("resume") {
        Some(p) => {
            let mut s = load_checkpoint(&checkpoint_file(&p))?;
            if s.config != r.config {
                log::warn!("resuming with the checkpoint's own config; command-line training keys are ignored");
            }
            s.config.total_steps = s.config.total_steps.max(r.config.total_steps);
            resume(s, &data, Some(&out))?
        }
        None => fit(r.config.clone(), &data, Some(&out))?,
    };
    if let Some(spec) = &data.spec {
        write_text(&out.join(RUN_SPEC), &spec.to_text())?;
    }
    let last = state.metrics.last();
    println!(
        "step {}: held-out psnr {:.2} dB, ssim {:.4}, {} gaussians ({} dynamic); outputs in {}",
        state.step,
        last.map_or(f64::NAN, |m| m.psnr),
        last.map_or(f64::NAN, |m| m.ssim),
        state.model.len(),
        state.model.n_dynamic(),
        out.display()
    );
    Ok(())
}

fn cmd_render(r: &Resolved) -> Result<()> {
    let ck = r.path("checkpoint").unwrap_or_else(|| r.out("run"));
    let ck_file = checkpoint_file(&ck);
    let state = load_checkpoint(&ck_file)?;
    let spec_path = ck_file.parent().unwrap_or(Path::new(".")).join(RUN_SPEC);
    let spec = match spec_path.exists() {
        true => SceneSpec::parse(&std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?)?,
        false => SceneSpec::mini(state.config.seed),
    };
    let t: f64 = r.parsed("t")?.unwrap_or(0.5);
    let view: usize = r.parsed("view")?.unwrap_or(0);
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("--t must lie in [0, 1], got {t}")));
    }
    if view >= spec.rig.n_views {
        return Err(Error::Config(format!(
            "--view {view} out of range (rig has {})",
            spec.rig.n_views
        )));
    }
    let cam = spec.rig.camera(view, t);
    let gs = state.model.gaussians_at(t)?;
    let (_, out) = render_gaussians(&gs, &cam, &state.model.settings, false);
    let dir = r
        .path("out")
        .unwrap_or_else(|| ck_file.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("render_v{view}_t{t:.3}.ppm"));
    out.image.save_ppm(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn score(p: &Partition, truth: &[(u64, Label)]) -> String {
    let truth: BTreeMap<u64, Label> = truth.iter().copied().collect();
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (id, l) in p.ids.iter().zip(&p.labels) {
        match (l, truth.get(id)) {
            (Label::Dynamic, Some(Label::Dynamic)) => tp += 1,
            (Label::Dynamic, _) => fp += 1,
            (Label::Static, Some(Label::Dynamic)) => fnn += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 1.0 } else { a as f64 / (a + b) as f64 };
    format!(
        "precision {:.4} recall {:.4} ({tp} true, {fp} false positive, {fnn} missed)",
        ratio(tp, fp),
        ratio(tp, fnn)
    )
}

fn cmd_classify(r: &Resolved) -> Result<()> {
    let out = r.out("run");
    let params = SeparationParams {
        tau: r.config.tau_var,
        epsilon: r.config.epsilon,
        gamma: r.config.gamma,
    };
    let (data, scene) = load_data(r)?;
    let partition = match r.path("checkpoint") {
        Some(p) => {
            let mut state = load_checkpoint(&checkpoint_file(&p))?;
            state.config.tau_var = params.tau;
            state.config.epsilon = params.epsilon;
            state.config.gamma = params.gamma;
            state.model.dynamic = None;
            state.separate(&data)?;
            state.partition().cloned().expect("separate installs a partition")
        }
        None => {
            let spec = match (scene, &data.spec) {
                (Some(s), _) => s.spec,
                (None, Some(s)) => s.clone(),
                (None, None) => {
                    return Err(Error::InvalidInput(
                        "dataset has no spec.txt; pass --checkpoint to classify a trained model".into(),
                    ))
                }
            };
            classify_oracle(&generate(&spec)?, &data, &params)?
        }
    };
    write_text(&out.join(PARTITION_REPORT), &partition.report())?;
    let mut line = format!("{} of {} gaussians dynamic", partition.n_dynamic(), partition.ids.len());
    if let Some(truth) = &data.labels {
        line = format!("{line}; {}", score(&partition, truth));
    }
    println!("{line}");
    Ok(())
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "ppm") {
                found.push(p.strip_prefix(dir).expect("walked from dir").to_path_buf());
            }
        }
    }
    found.sort();
    Ok(found)
}

fn cmd_eval(r: &Resolved) -> Result<()> {
    let pred = r.require_path("pred")?;
    let truth = r.require_path("truth")?;
    let files = ppm_files(&truth)?;
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no .ppm images under {}", truth.display())));
    }
    let mut report = String::from("# image psnr ssim\n");
    let (mut ps, mut ss) = (0.0, 0.0);
    for f in &files {
        let a = Image::load_ppm(&pred.join(f))?;
        let b = Image::load_ppm(&truth.join(f))?;
        let (p, s) = (psnr(&a, &b)?, ssim(&a, &b)?);
        report.push_str(&format!("{} {p:.4} {s:.6}\n", f.display()));
        ps += p;
        ss += s;
    }
    let n = files.len() as f64;
    let summary = format!(
        "mean psnr {:.4} dB, mean ssim {:.6} over {} images",
        ps / n,
        ss / n,
        files.len()
    );
    report.push_str(&format!("# {summary}\n"));
    if let Some(out) = r.path("out") {
        write_text(&out.join("eval.txt"), &report)?;
    }
    println!("{summary}");
    Ok(())
}

fn cmd_prune_report(r: &Resolved) -> Result<()> {
    let ck = r.path("checkpoint").unwrap_or_else(|| r.out("run"));
    let state: TrainState = load_checkpoint(&checkpoint_file(&ck))?;
    let (data, _) = load_data(r)?;
    let table = state.importance(&data)?;
    let tau = r.config.tau_prune;
    let ids: Vec<u64> = state.model.gaussians.iter().map(|g| g.id).collect();
    let mut text = match prune_plan(&table, tau) {
        Ok((_, remove)) => {
            println!("{} of {} gaussians below tau={tau}", remove.len(), ids.len());
            prune_report(&ids, &table, &remove)
        }
        Err(e @ Error::PruneEmptiesScene { .. }) => {
            println!("{e}");
            prune_report(&ids, &table, &[])
        }
        Err(e) => return Err(e),
    };
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| table.w[a].total_cmp(&table.w[b]).then(ids[a].cmp(&ids[b])));
    text.push_str("# importance of every gaussian, ascending\n");
    for i in order {
        text.push_str(&format!("{} {:e}\n", ids[i], table.w[i]));
    }
    text.push_str("# removed during training\n");
    text.push_str(&state.prune_report());
    let out = r
        .path("out")
        .unwrap_or_else(|| checkpoint_file(&ck).parent().unwrap_or(Path::new(".")).to_path_buf());
    write_text(&out.join(PRUNE_REPORT), &text)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::NumericalAbort { .. } | Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_IO,
    }
}

fn init_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    {
        // a pool already built by an earlier call in this process stays as it is
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let r = resolve(cli)?;
    init_threads(r.parsed("threads")?.unwrap_or(1))?;
    log::info!("resolved config:\n{}", r.echo());
    match &cli.command {
        Command::Generate => cmd_generate(&r),
        Command::Fit(_) => {
            write_text(&r.out("run").join("resolved.txt"), &r.echo())?;
            cmd_fit(&r)
        }
        Command::Render(_) => cmd_render(&r),
        Command::Classify(_) => cmd_classify(&r),
        Command::Eval(_) => cmd_eval(&r),
        Command::PruneReport(_) => cmd_prune_report(&r),
    }
}

/// Parses `argv` (program name first), runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dsplat: {e}");
            exit_code(&e)
        }
    }
}

/// Logger driven by `DSPLAT_LOG` (default `info`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("DSPLAT_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}
