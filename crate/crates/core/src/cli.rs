//! Command-line front end. `run` returns the process exit code.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::attnviz::{self, Upsample, DEFAULT_ALPHA};
use crate::costmodel::{cost_report, parse_resolutions, scaling_report, FLOP_CONVENTION};
use crate::dataio::{self, load_dataset, synth_shapes, write_pgm, write_ppm, Dataset, RgbImage, RunConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, checkpoint, model_grad_check, HeadMode, NormKind, PatchConvNet, TokenMode};
use crate::trainer::{self, evaluate, finetune_resolution, fit, Outputs, SweepGrid};

#[derive(Parser, Debug)]
#[command(name = "patchpool", version, about = "Patch-based convnet with attention pooling: cost model, trainer and attention maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    resolution: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long = "drop-path")]
    drop_path: Option<String>,
    /// Dataset root with one subdirectory of PPM files per class.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (default `runs/<subcommand>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch.
    Train(Common),
    /// Continue training a checkpoint at a new resolution.
    Finetune(Common),
    /// Accuracy of a checkpoint on the validation split.
    Eval(Common),
    /// Parameter, FLOP and activation-memory report.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 4)]
        bytes: usize,
        #[arg(long)]
        csv: bool,
        /// Resolutions for a scaling table, e.g. `32:512:32` or `224,384`.
        #[arg(long)]
        scaling: Option<String>,
    },
    /// Attention overlays for one image.
    Visualize {
        #[command(flatten)]
        common: Common,
        /// PPM input; without it a synthetic validation image is used.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Index of the synthetic validation image.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Render one overlay per class for the k most probable classes.
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        /// Nearest-neighbour upsampling (exact patch boundaries).
        #[arg(long)]
        nearest: bool,
    },
    /// Grid over learning rate, weight decay and drop-path.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        lrs: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        wds: Vec<f64>,
        #[arg(long = "drop-paths", value_delimiter = ',', required = true)]
        drop_paths: Vec<f64>,
    },
    /// Finite-difference check of all parameter gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Check both norm kinds, both token modes and both head modes.
        #[arg(long)]
        all_variants: bool,
    },
    /// Write the synthetic shapes dataset as PPM class directories.
    Synth(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Finetune(_) => "finetune",
            Command::Eval(_) => "eval",
            Command::Analyze { .. } => "analyze",
            Command::Visualize { .. } => "visualize",
            Command::Sweep { .. } => "sweep",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Synth(_) => "synth",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train(c) | Command::Finetune(c) | Command::Eval(c) | Command::Synth(c) => c,
            Command::Analyze { common, .. }
            | Command::Visualize { common, .. }
            | Command::Sweep { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

impl Common {
    fn flags(&self, extra: &[(&str, &str)]) -> Result<Vec<(String, String)>> {
        let mut out: Vec<(String, String)> = extra.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::ConfigKey {
                key: s.clone(),
                line: None,
                detail: "--set expects KEY=VALUE".into(),
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("preset", self.preset.clone()),
            ("resolution", self.resolution.clone()),
            ("seed", self.seed.clone()),
            ("epochs", self.epochs.clone()),
            ("lr", self.lr.clone()),
            ("drop_path", self.drop_path.clone()),
            ("data", self.data.as_ref().map(|p| p.display().to_string())),
            ("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        out.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        Ok(out)
    }
}

struct Context {
    cfg: RunConfig,
    out_dir: PathBuf,
    inputs: Vec<PathBuf>,
    stdout: Vec<u8>,
}

impl Context {
    fn say(&mut self, text: impl AsRef<str>) {
        self.stdout.extend_from_slice(text.as_ref().as_bytes());
        if !text.as_ref().ends_with('\n') {
            self.stdout.push(b'\n');
        }
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

fn write_manifest(ctx: &Context, command: &str, argv: &[String]) -> Result<()> {
    let mut m = String::new();
    let _ = writeln!(m, "# patchpool run manifest");
    let _ = writeln!(m, "command = {command}");
    let _ = writeln!(m, "argv = {}", argv.join(" "));
    let _ = writeln!(m, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "threads = {}", rayon::current_num_threads());
    let _ = writeln!(m, "\n[config]");
    m.push_str(&ctx.cfg.describe());
    let _ = writeln!(m, "\n[inputs]");
    let mut files = Vec::new();
    for p in &ctx.inputs {
        collect_files(p, &mut files)?;
    }
    for f in files {
        let _ = writeln!(m, "{}  {}", sha256_file(&f)?, f.display());
    }
    fs::create_dir_all(&ctx.out_dir).map_err(|e| Error::io(&ctx.out_dir, e))?;
    let path = ctx.out_dir.join("manifest.txt");
    fs::write(&path, m).map_err(|e| Error::io(&path, e))
}

fn datasets(ctx: &mut Context) -> Result<(Dataset, Dataset)> {
    let cfg = &ctx.cfg;
    match &cfg.data {
        Some(root) => {
            ctx.inputs.push(root.clone());
            load_dataset(root, cfg.resolution, cfg.plan.seed)
        }
        None => synth_shapes(cfg.n_per_class, cfg.resolution, cfg.plan.seed),
    }
}

fn load_checkpoint(ctx: &mut Context) -> Result<PatchConvNet> {
    let path = ctx
        .cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("this subcommand needs --checkpoint".into()))?;
    ctx.inputs.push(path.clone());
    checkpoint::load(&path)
}

fn fresh_model(ctx: &RunConfig, classes: usize) -> Result<PatchConvNet> {
    let mut model_cfg = ctx.model.clone();
    if ctx.provenance.get("num_classes").copied() == Some(dataio::Provenance::Default) {
        model_cfg.num_classes = classes;
    }
    build_model(&model_cfg, ctx.plan.seed)
}

fn summarize(ctx: &mut Context, log: &trainer::TrainLog) {
    if let Some(e) = log.last() {
        ctx.say(format!(
            "epoch {} step {}: train_loss {:.4} train_acc {:.4} val_acc {:.4}",
            e.epoch, e.step, e.train_loss, e.train_acc, e.val_acc
        ));
    } else {
        ctx.say("no epochs run");
    }
}

fn cmd_train(ctx: &mut Context) -> Result<()> {
    let (train, val) = datasets(ctx)?;
    let mut model = fresh_model(&ctx.cfg, train.num_classes())?;
    let out = Outputs { dir: ctx.out_dir.clone() };
    let norm = train.norm;
    ctx.say(format!("normalization mean {:?} std {:?}", norm.mean, norm.std));
    let log = fit(&mut model, &train, &val, &ctx.cfg.plan, Some(&out))?;
    if log.epochs.is_empty() {
        trainer::fit::save_outputs(&model, &out)?;
    }
    summarize(ctx, &log);
    ctx.say(format!("log {}; checkpoints in {}", out.log_path().display(), out.dir.display()));
    Ok(())
}

fn cmd_finetune(ctx: &mut Context) -> Result<()> {
    let mut model = load_checkpoint(ctx)?;
    let (train, val) = datasets(ctx)?;
    let out = Outputs { dir: ctx.out_dir.clone() };
    let log = finetune_resolution(&mut model, &train, &val, ctx.cfg.resolution, &ctx.cfg.plan, Some(&out))?;
    if log.epochs.is_empty() {
        trainer::fit::save_outputs(&model, &out)?;
        let (acc, _) = evaluate(&model, &val)?;
        ctx.say(format!("val_acc at {}px without training: {acc:.4}", ctx.cfg.resolution));
    }
    summarize(ctx, &log);
    Ok(())
}

fn cmd_eval(ctx: &mut Context) -> Result<()> {
    let model = load_checkpoint(ctx)?;
    let (train, val) = datasets(ctx)?;
    let (train_acc, train_loss) = evaluate(&model, &train)?;
    let (val_acc, val_loss) = evaluate(&model, &val)?;
    ctx.say("split,images,accuracy,loss");
    ctx.say(format!("train,{},{train_acc:.6},{train_loss:.6}", train.len()));
    ctx.say(format!("val,{},{val_acc:.6},{val_loss:.6}", val.len()));
    Ok(())
}

fn cmd_analyze(ctx: &mut Context, batch: usize, bytes: usize, csv: bool, scaling: Option<&str>) -> Result<()> {
    let c = ctx.cfg.model.clone();
    let r = ctx.cfg.resolution;
    match scaling {
        Some(spec) => {
            let res = parse_resolutions(spec)?;
            let rep = scaling_report(&c, &res, batch, bytes)?;
            ctx.say(if csv { rep.to_csv() } else { rep.to_table() });
        }
        None => {
            let rep = cost_report(&c, r, r, batch, bytes)?;
            ctx.say(if csv { rep.to_csv() } else { rep.to_table() });
        }
    }
    if csv {
        ctx.say(format!("# {FLOP_CONVENTION}"));
    }
    Ok(())
}

fn cmd_visualize(
    ctx: &mut Context,
    image: Option<&Path>,
    index: usize,
    topk: Option<usize>,
    alpha: f64,
    nearest: bool,
) -> Result<()> {
    let model = match ctx.cfg.checkpoint.clone() {
        Some(_) => load_checkpoint(ctx)?,
        None => build_model(&ctx.cfg.model, ctx.cfg.plan.seed)?,
    };
    if topk.is_some() && model.config.token_mode != TokenMode::PerClass {
        return Err(Error::Mode(
            "--topk needs a model with token_mode = per_class; this model has a single token".into(),
        ));
    }
    let method = if nearest { Upsample::Nearest } else { Upsample::Bilinear };
    let res = ctx.cfg.resolution;
    let (x, base) = match image {
        Some(path) => {
            ctx.inputs.push(path.to_path_buf());
            let raw = dataio::center_resize(&dataio::read_ppm(path)?.to_tensor(), res)?;
            let base = RgbImage::from_tensor(&raw)?;
            // standardize with the image's own channel statistics
            let mut x = raw.clone();
            dataio::Normalization::from_images(&[&raw]).apply(&mut x);
            (x, base)
        }
        None => {
            let (_, val) = synth_shapes(ctx.cfg.n_per_class, res, ctx.cfg.plan.seed)?;
            let sample = val
                .items
                .get(index)
                .ok_or_else(|| Error::Config(format!("--index {index} beyond {} validation images", val.len())))?;
            let mut raw = sample.image.clone();
            val.norm.invert(&mut raw);
            (sample.image.clone(), RgbImage::from_tensor(&raw)?)
        }
    };
    let x = x.reshape(&[1, 3, res, res])?;
    fs::create_dir_all(&ctx.out_dir).map_err(|e| Error::io(&ctx.out_dir, e))?;
    write_ppm(&ctx.out_dir.join("input.ppm"), &base)?;
    match topk {
        Some(k) => {
            for (rank, cm) in attnviz::topk_class_maps(&model, &x, &base, k, alpha, method)?.into_iter().enumerate() {
                let path = ctx.out_dir.join(format!("top{}_class{}.ppm", rank + 1, cm.class));
                write_ppm(&path, &cm.overlay)?;
                ctx.say(format!("class {} p={:.4} -> {}", cm.class, cm.probability, path.display()));
            }
        }
        None => {
            let (map, logits) = attnviz::extract_map(&model, &x)?;
            for t in 0..map.tokens() {
                let heat = attnviz::upsample_map(&map.grid(t), res, res, method)?;
                write_pgm(&ctx.out_dir.join(format!("map{t}.pgm")), &attnviz::heat_to_gray(&heat)?)?;
                write_ppm(&ctx.out_dir.join(format!("overlay{t}.ppm")), &attnviz::render_overlay(&base, &heat, alpha)?)?;
                let row: Vec<String> = map.row(t).iter().map(|v| format!("{v:.4}")).collect();
                ctx.say(format!("token {t} map ({}x{}): {}", map.h, map.w, row.join(" ")));
            }
            let pred = trainer::argmax_rows(&logits.reshape(&[1, model.config.num_classes])?)[0];
            ctx.say(format!("predicted class {pred}; images in {}", ctx.out_dir.display()));
        }
    }
    Ok(())
}

fn cmd_sweep(ctx: &mut Context, grid: SweepGrid) -> Result<()> {
    let (train, val) = datasets(ctx)?;
    let mut model_cfg = ctx.cfg.model.clone();
    if ctx.cfg.provenance.get("num_classes").copied() == Some(dataio::Provenance::Default) {
        model_cfg.num_classes = train.num_classes();
    }
    let report = trainer::sweep(&grid, &ctx.cfg.plan, &model_cfg, ctx.cfg.plan.seed, &train, &val)?;
    let csv = report.to_csv();
    fs::create_dir_all(&ctx.out_dir).map_err(|e| Error::io(&ctx.out_dir, e))?;
    let path = ctx.out_dir.join("sweep.csv");
    fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    ctx.say(csv);
    Ok(())
}

fn cmd_gradcheck(ctx: &mut Context, eps: f64, tol: f64, batch: usize, all: bool) -> Result<()> {
    let base = ctx.cfg.model.clone();
    let mut configs = vec![base.clone()];
    if all {
        configs.clear();
        for norm in [NormKind::LayerNorm, NormKind::BatchNorm] {
            for (token, head) in [
                (TokenMode::Single, HeadMode::ClassAttention),
                (TokenMode::PerClass, HeadMode::ClassAttention),
                (TokenMode::Single, HeadMode::AveragePool),
            ] {
                configs.push(crate::model::ModelConfig {
                    norm_kind: norm,
                    token_mode: token,
                    head_mode: head,
                    ..base.clone()
                });
            }
        }
    }
    let r = ctx.cfg.resolution;
    let mut worst: f64 = 0.0;
    for c in &configs {
        let rep = model_grad_check(c, ctx.cfg.plan.seed, batch, r, eps, tol)?;
        worst = worst.max(rep.max_rel_error);
        ctx.say(format!(
            "{} {} {} @{r}px: max relative error {:.3e} (scaled {:.3e}, {} entries)",
            c.norm_kind, c.token_mode, c.head_mode, rep.max_rel_error, rep.max_scaled_error, rep.checked
        ));
    }
    ctx.say(format!("max relative error {worst:.3e} (tolerance {tol:e})"));
    if worst < tol {
        Ok(())
    } else {
        Err(Error::Statistics(format!("gradient check failed: {worst:.3e} >= {tol:e}")))
    }
}

fn cmd_synth(ctx: &mut Context) -> Result<()> {
    let (train, val) = synth_shapes(ctx.cfg.n_per_class, ctx.cfg.resolution, ctx.cfg.plan.seed)?;
    let mut quadrants = String::from("split,file,label,quadrant\n");
    for ds in [&train, &val] {
        let split = match ds.split {
            dataio::Split::Train => "train",
            dataio::Split::Val => "val",
        };
        for (i, s) in ds.items.iter().enumerate() {
            let class = &ds.class_names[s.label];
            let dir = ctx.out_dir.join(split).join(class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut raw = s.image.clone();
            ds.norm.invert(&mut raw);
            let file = dir.join(format!("{i:05}.ppm"));
            write_ppm(&file, &RgbImage::from_tensor(&raw)?)?;
            let _ = writeln!(quadrants, "{split},{},{},{}", file.display(), s.label, s.quadrant.unwrap_or(0));
        }
    }
    let path = ctx.out_dir.join("quadrants.csv");
    fs::write(&path, quadrants).map_err(|e| Error::io(&path, e))?;
    ctx.say(format!(
        "wrote {} train and {} val images to {}",
        train.len(),
        val.len(),
        ctx.out_dir.display()
    ));
    Ok(())
}

fn dispatch(cmd: &Command, argv: &[String]) -> Result<Vec<u8>> {
    let common = cmd.common();
    let extra: &[(&str, &str)] = match cmd {
        Command::Finetune(_) => &[("mode", "finetune")],
        _ => &[],
    };
    let flags = common.flags(extra)?;
    let cfg = dataio::parse_config(common.config.as_deref(), &flags)?;
    let out_dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cmd.name()));
    let mut ctx = Context {
        cfg,
        out_dir,
        inputs: common.config.iter().cloned().collect(),
        stdout: Vec::new(),
    };
    let outcome = match cmd {
        Command::Train(_) => cmd_train(&mut ctx),
        Command::Finetune(_) => cmd_finetune(&mut ctx),
        Command::Eval(_) => cmd_eval(&mut ctx),
        Command::Analyze {
            batch, bytes, csv, scaling, ..
        } => cmd_analyze(&mut ctx, *batch, *bytes, *csv, scaling.as_deref()),
        Command::Visualize {
            image,
            index,
            topk,
            alpha,
            nearest,
            ..
        } => cmd_visualize(&mut ctx, image.as_deref(), *index, *topk, *alpha, *nearest),
        Command::Sweep {
            lrs, wds, drop_paths, ..
        } => cmd_sweep(
            &mut ctx,
            SweepGrid {
                lr: lrs.clone(),
                weight_decay: wds.clone(),
                drop_path: drop_paths.clone(),
            },
        ),
        Command::Gradcheck {
            eps,
            tol,
            batch,
            all_variants,
            ..
        } => cmd_gradcheck(&mut ctx, *eps, *tol, *batch, *all_variants),
        Command::Synth(_) => cmd_synth(&mut ctx),
    };
    let manifest = write_manifest(&ctx, cmd.name(), argv);
    outcome?;
    manifest?;
    Ok(ctx.stdout)
}

/// Worker threads from `PATCHPOOL_THREADS` (default 1).
fn init_threads() -> Result<()> {
    let n = match std::env::var("PATCHPOOL_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("PATCHPOOL_THREADS={v:?} is not a positive integer")))?,
        Err(_) => 1,
    };
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit code: 0 on success, 1 on usage or validation errors, 2 on runtime
/// failures.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    match dispatch(&cli.command, argv) {
        Ok(out) => {
            let _ = std::io::stdout().write_all(&out);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
