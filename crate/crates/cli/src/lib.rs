//! Command-line pipeline: synthesize a corpus, fit concepts and priors,
//! pretrain, refine with group-relative policy optimization, then score and
//! restore images.
//!
//! Layout under the output directory:
//!
//! ```text
//! corpus/               clean/, smoky/, unpaired/, manifest.json
//! concepts.json         learned concept pair
//! priors.json           P95 channel-gap reference
//! pretrain/             checkpoint.bin, loss.csv
//! rpo[-no-xx]/          checkpoint.bin, metrics.csv
//! scores/<name>.csv     per-image reward breakdown
//! restored/<name>/      restored images and restore.csv
//! ```
//!
//! Each command also writes the effective configuration next to its output.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use desmoke_core::diffusion::{rollout, Checkpoint, Condition, NoiseMode, NoiseSchedule};
use desmoke_core::image::{channel_stats, psnr, read_ppm, write_ppm_with_comment, ImageTensor};
use desmoke_core::physics::{build_prior_reference, PriorReference};
use desmoke_core::policy::{
    pretrain, rpo_train, Optimizer, PretrainSample, RewardModel, RewardWeights, RpoInput, METRICS_COLUMNS,
};
use desmoke_core::quality::{CeiqProxy, ExternalScores, Normalized, QualityScorer};
use desmoke_core::semantic::{
    train_concepts, ConceptFile, ConceptPair, EmbeddingProvider, HistogramProjection, PrecomputedEmbeddings,
};
use desmoke_core::smoke::{gen_corpus, gen_unpaired, image_name, read_corpus, read_image_dir, write_corpus, LoadedCorpus, ProceduralTissue};
use desmoke_core::{rng, Error};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 2 config, 3 missing prerequisite, 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Missing(_) => 3,
            CliError::Core(e) if e.is_numeric() => 4,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "desmoke", version, about = "Reward-guided diffusion desmoking pipeline")]
pub struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Recompute outputs that already exist.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the paired and unpaired synthetic corpus.
    Synth,
    /// Fit the clear/smoky concept pair on the training split.
    Concepts,
    /// Build P95 channel-gap priors from the clean training split.
    Priors,
    /// Supervised cold start on the paired training split (resumes).
    Pretrain,
    /// Reward-driven refinement on the unpaired corpus.
    Rpo(Ablation),
    /// Per-image reward breakdown for a directory of PPM images.
    Score {
        dir: PathBuf,
        /// Smoky inputs with matching file names, for the intra-channel term.
        #[arg(long)]
        inputs: Option<PathBuf>,
    },
    /// Restore a directory of smoky PPM images.
    Restore {
        dir: PathBuf,
        /// Defaults to the refined checkpoint, else the pretrained one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample with noise instead of following the mean path.
        #[arg(long)]
        stochastic: bool,
    },
}

#[derive(Debug, Clone, Copy, Default, Args)]
pub struct Ablation {
    #[arg(long)]
    pub no_vc: bool,
    #[arg(long)]
    pub no_pg: bool,
    #[arg(long)]
    pub no_rf: bool,
}

impl Ablation {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.no_pg {
            cfg.rewards.w_pg = 0.0;
        }
        if self.no_rf {
            cfg.rewards.w_rf = 0.0;
        }
        if self.no_vc {
            cfg.rewards.w_vc = 0.0;
        }
    }

    fn tags(&self) -> Vec<&'static str> {
        [(self.no_pg, "no-pg"), (self.no_rf, "no-rf"), (self.no_vc, "no-vc")]
            .into_iter()
            .filter_map(|(on, tag)| on.then_some(tag))
            .collect()
    }

    fn dir_name(&self) -> String {
        std::iter::once("rpo").chain(self.tags()).collect::<Vec<_>>().join("-")
    }
}

/// Resolved configuration shared by every command.
pub struct Context {
    pub cfg: RunConfig,
    pub hash: String,
    pub out: PathBuf,
    pub force: bool,
}

impl Context {
    pub fn new(cli: &Cli) -> CliResult<Self> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(o) = &cli.out {
            cfg.out = o.clone();
        }
        if let Command::Rpo(ab) = &cli.command {
            ab.apply(&mut cfg);
        }
        cfg.validate()?;
        Ok(Self { hash: cfg.hash(), out: cfg.out.clone(), cfg, force: cli.force })
    }

    fn corpus_dir(&self) -> PathBuf {
        self.out.join("corpus")
    }

    fn concepts_path(&self) -> PathBuf {
        self.out.join("concepts.json")
    }

    fn priors_path(&self) -> PathBuf {
        self.out.join("priors.json")
    }

    fn pretrain_dir(&self) -> PathBuf {
        self.out.join("pretrain")
    }

    fn write_effective(&self, path: &Path) -> CliResult<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let text = format!("# config_hash = \"{}\"\n{}", self.hash, self.cfg.to_toml());
        fs::write(path, text)?;
        Ok(())
    }

    fn skip_existing(&self, path: &Path) -> bool {
        if path.exists() && !self.force {
            eprintln!("{} exists; pass --force to recompute", path.display());
            return true;
        }
        false
    }

    fn load_corpus(&self) -> CliResult<LoadedCorpus> {
        let dir = self.corpus_dir();
        if !dir.join("manifest.json").exists() {
            return Err(CliError::Missing(format!("corpus at {} (run `synth`)", dir.display())));
        }
        Ok(read_corpus(&dir)?)
    }

    fn load_concepts(&self) -> CliResult<ConceptFile> {
        let path = self.concepts_path();
        if !path.exists() {
            return Err(CliError::Missing(format!("concepts at {} (run `concepts`)", path.display())));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn load_priors(&self) -> CliResult<PriorReference> {
        let path = self.priors_path();
        if !path.exists() {
            return Err(CliError::Missing(format!("priors at {} (run `priors`)", path.display())));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn provider(&self) -> CliResult<Box<dyn EmbeddingProvider>> {
        let k = &self.cfg.concepts;
        Ok(match k.provider {
            config::ProviderKind::Histogram => Box::new(HistogramProjection::new(self.cfg.seed, k.dim)?),
            config::ProviderKind::Precomputed => {
                let path = k.embeddings.as_ref().expect("validated");
                if !path.exists() {
                    return Err(CliError::Missing(format!("embedding table {}", path.display())));
                }
                let table = PrecomputedEmbeddings::load(path)?;
                if table.dim != k.dim {
                    return Err(CliError::Config(format!(
                        "embedding table has dimension {}, config says {}",
                        table.dim, k.dim
                    )));
                }
                Box::new(table)
            }
        })
    }

    fn scorers(&self) -> CliResult<Vec<Box<dyn QualityScorer>>> {
        let q = &self.cfg.quality;
        let mut out: Vec<Box<dyn QualityScorer>> = Vec::new();
        if q.ceiq {
            out.push(Box::new(Normalized { inner: CeiqProxy, scale: q.ceiq_scale, offset: q.ceiq_offset }));
        }
        if let Some(path) = &q.liqe_scores {
            if !path.exists() {
                return Err(CliError::Missing(format!("LIQE score sidecar {}", path.display())));
            }
            let table = ExternalScores::from_csv("liqe", (0.0, 1.0), path)?;
            out.push(Box::new(Normalized { inner: table, scale: q.liqe_scale, offset: q.liqe_offset }));
        }
        Ok(out)
    }

    /// Loads only what the enabled reward terms need.
    fn reward_model(&self, weights: RewardWeights) -> CliResult<RewardModel> {
        let prior = self.load_priors()?;
        let (concepts, provider) = if weights.vc != 0.0 {
            let file = self.load_concepts()?;
            (Some(file.concepts()?), Some(self.provider()?))
        } else {
            (None, None)
        };
        let scorers = if weights.rf != 0.0 { self.scorers()? } else { Vec::new() };
        let model = RewardModel { prior, concepts, provider, scorers, weights };
        model.validate()?;
        Ok(model)
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::Synth => cmd_synth(&ctx),
        Command::Concepts => cmd_concepts(&ctx),
        Command::Priors => cmd_priors(&ctx),
        Command::Pretrain => cmd_pretrain(&ctx),
        Command::Rpo(ab) => cmd_rpo(&ctx, ab),
        Command::Score { dir, inputs } => cmd_score(&ctx, dir, inputs.as_deref()),
        Command::Restore { dir, checkpoint, stochastic } => {
            cmd_restore(&ctx, dir, checkpoint.as_deref(), *stochastic)
        }
    }
}

pub fn cmd_synth(ctx: &Context) -> CliResult<()> {
    let dir = ctx.corpus_dir();
    if ctx.skip_existing(&dir.join("manifest.json")) {
        return Ok(());
    }
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    let c = &ctx.cfg.corpus;
    let smoke = ctx.cfg.smoke_config();
    let corpus = gen_corpus(&smoke, c.pairs, c.height, c.width, &ProceduralTissue { seed: ctx.cfg.seed })?;
    let unpaired = gen_unpaired(&smoke, c.unpaired, c.height, c.width)?;
    let manifest = write_corpus(&dir, &corpus, &unpaired, Some(ctx.hash.clone()))?;
    ctx.write_effective(&dir.join("config.toml"))?;
    eprintln!(
        "wrote {} pairs and {} unpaired images to {} (hash {})",
        manifest.pairs,
        manifest.unpaired,
        dir.display(),
        &manifest.corpus_hash[..12]
    );
    Ok(())
}

pub fn cmd_concepts(ctx: &Context) -> CliResult<()> {
    let path = ctx.concepts_path();
    if ctx.skip_existing(&path) {
        return Ok(());
    }
    let corpus = ctx.load_corpus()?;
    let provider = ctx.provider()?;
    let pairs: Vec<(&ImageTensor, &ImageTensor)> = corpus.pairs.train().map(|s| (&s.smoky, &s.clean)).collect();
    let trained = train_concepts(provider.as_ref(), &pairs, &ctx.cfg.concept_training())?;
    let ConceptPair { v_pos, v_neg, tau } = trained.concepts;
    let file = ConceptFile {
        dim: v_pos.len(),
        v_pos,
        v_neg,
        tau,
        provider_id: provider.id(),
        corpus_hash: corpus.manifest.corpus_hash.clone(),
        config_hash: Some(ctx.hash.clone()),
    };
    fs::create_dir_all(&ctx.out)?;
    fs::write(&path, serde_json::to_string_pretty(&file)?)?;
    let mut trace = csv_with_hash(&ctx.out.join("concepts_loss.csv"), &ctx.hash, &[])?;
    trace.write_record(["step", "loss"])?;
    for (i, l) in trained.loss_trace.iter().enumerate() {
        trace.write_record([i.to_string(), l.to_string()])?;
    }
    trace.flush()?;
    ctx.write_effective(&ctx.out.join("concepts.config.toml"))?;
    eprintln!("concepts: final matching loss {:.4} -> {}", trained.final_loss, path.display());
    Ok(())
}

pub fn cmd_priors(ctx: &Context) -> CliResult<()> {
    let path = ctx.priors_path();
    if ctx.skip_existing(&path) {
        return Ok(());
    }
    let corpus = ctx.load_corpus()?;
    let clean: Vec<ImageTensor> = corpus.pairs.train().map(|s| s.clean.clone()).collect();
    let mut prior = build_prior_reference(&clean)?;
    prior.config_hash = Some(ctx.hash.clone());
    fs::create_dir_all(&ctx.out)?;
    fs::write(&path, serde_json::to_string_pretty(&prior)?)?;
    ctx.write_effective(&ctx.out.join("priors.config.toml"))?;
    eprintln!("priors: MRG {:.4} MRB {:.4} MGB {:.4}", prior.mrg, prior.mrb, prior.mgb);
    Ok(())
}

/// CSV writer whose first line is `# config_hash=<hash>[ extra...]`.
fn csv_with_hash(path: &Path, hash: &str, extra: &[String]) -> CliResult<csv::Writer<fs::File>> {
    let mut file = fs::File::create(path)?;
    let mut line = format!("# config_hash={hash}");
    for e in extra {
        line.push(' ');
        line.push_str(e);
    }
    writeln!(file, "{line}")?;
    Ok(csv::Writer::from_writer(file))
}

pub fn cmd_pretrain(ctx: &Context) -> CliResult<()> {
    let dir = ctx.pretrain_dir();
    let ckpt_path = dir.join("checkpoint.bin");
    let loss_path = dir.join("loss.csv");
    let corpus = ctx.load_corpus()?;
    let concepts = ctx.load_concepts()?;
    let model_cfg = ctx.cfg.model_config(concepts.dim);
    let sched_cfg = ctx.cfg.schedule_config();
    let pcfg = ctx.cfg.pretrain_config();
    let fresh = ctx.force || !ckpt_path.exists();

    let den = desmoke_core::diffusion::Denoiser::new(model_cfg.clone(), Some(concepts.v_pos.clone()))?;
    let mut opt = Optimizer::new(pcfg.optimizer, pcfg.lr, den.param_count())?;
    let (mut params, start) = if fresh {
        (den.init_params(), 0)
    } else {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.model != model_cfg || ck.schedule != sched_cfg || ck.concept != concepts.v_pos {
            return Err(CliError::Config(format!(
                "{} was trained with a different model, schedule or concept; pass --force to restart",
                ckpt_path.display()
            )));
        }
        if let Some(m) = ck.optimizer {
            opt = opt.with_moments(m)?;
        }
        (ck.params, ck.step)
    };
    if start >= pcfg.steps as u64 {
        eprintln!("pretraining already at step {start}; nothing to do");
        return Ok(());
    }
    let samples = corpus
        .pairs
        .train()
        .map(|s| PretrainSample::new(&s.smoky, &s.clean, model_cfg.radius))
        .collect::<Result<Vec<_>, _>>()?;
    let sched = NoiseSchedule::new(sched_cfg)?;
    let log = pretrain(&den, &sched, &mut params, &mut opt, &samples, &pcfg, start)?;

    fs::create_dir_all(&dir)?;
    let mut csv = if fresh || !loss_path.exists() {
        let mut w = csv_with_hash(&loss_path, &ctx.hash, &[])?;
        w.write_record(["step", "loss"])?;
        w
    } else {
        csv::Writer::from_writer(fs::OpenOptions::new().append(true).open(&loss_path)?)
    };
    for (step, loss) in &log.losses {
        csv.write_record([step.to_string(), loss.to_string()])?;
    }
    csv.flush()?;
    Checkpoint {
        model: model_cfg,
        schedule: sched_cfg,
        concept: concepts.v_pos,
        step: pcfg.steps as u64,
        config_hash: Some(ctx.hash.clone()),
        params,
        optimizer: Some(opt.moments),
    }
    .save(&ckpt_path)?;
    ctx.write_effective(&dir.join("config.toml"))?;
    if let (Some(first), Some(last)) = (log.losses.first(), log.losses.last()) {
        eprintln!("pretrain: steps {}..{} loss {:.5} -> {:.5}", first.0, last.0 + 1, first.1, last.1);
    }
    Ok(())
}

fn load_checkpoint(path: &Path, what: &str) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Missing(format!("{what} checkpoint at {}", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

pub fn cmd_rpo(ctx: &Context, ablation: &Ablation) -> CliResult<()> {
    let dir = ctx.out.join(ablation.dir_name());
    let ckpt_path = dir.join("checkpoint.bin");
    if ctx.skip_existing(&ckpt_path) {
        return Ok(());
    }
    let base = load_checkpoint(&ctx.pretrain_dir().join("checkpoint.bin"), "pretrain")?;
    let corpus = ctx.load_corpus()?;
    if corpus.unpaired.is_empty() {
        return Err(CliError::Missing("unpaired smoky images in the corpus".into()));
    }
    let weights = ctx.cfg.weights();
    let rewards = ctx.reward_model(weights)?;
    let den = base.denoiser()?;
    let sched = NoiseSchedule::new(base.schedule)?;
    let inputs: Vec<RpoInput> = corpus
        .unpaired
        .iter()
        .enumerate()
        .map(|(i, img)| RpoInput { image: img.clone(), path: Some(format!("unpaired/{}", image_name(i))) })
        .collect();

    fs::create_dir_all(&dir)?;
    let mut extra = vec![format!("weights=pg:{},rf:{},vc:{}", weights.pg, weights.rf, weights.vc)];
    let tags = ablation.tags();
    extra.push(format!("ablation={}", if tags.is_empty() { "none".to_string() } else { tags.join(",") }));
    let mut csv = csv_with_hash(&dir.join("metrics.csv"), &ctx.hash, &extra)?;
    csv.write_record(METRICS_COLUMNS)?;
    let mut write_err = None;
    let outcome = rpo_train(&den, &sched, &base.params, &inputs, &rewards, &ctx.cfg.rpo_config(), |m| {
        let row = [
            m.iteration.to_string(),
            m.mean_reward.to_string(),
            m.reward_var.to_string(),
            m.r_pg_mean.to_string(),
            m.r_vc_mean.to_string(),
            m.r_rf_mean.to_string(),
            m.kl.to_string(),
            m.clip_fraction.to_string(),
            m.wall_ms.to_string(),
        ];
        if let Err(e) = csv.write_record(&row).and_then(|_| csv.flush().map_err(Into::into)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    Checkpoint {
        step: ctx.cfg.rpo.iterations as u64,
        config_hash: Some(ctx.hash.clone()),
        params: outcome.params,
        optimizer: Some(outcome.optimizer),
        ..base
    }
    .save(&ckpt_path)?;
    ctx.write_effective(&dir.join("config.toml"))?;
    if let (Some(a), Some(b)) = (outcome.metrics.first(), outcome.metrics.last()) {
        eprintln!("rpo: mean reward {:.4} -> {:.4} over {} iterations", a.mean_reward, b.mean_reward, outcome.metrics.len());
    }
    Ok(())
}

fn dir_label(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "images".into())
}

fn file_label(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn list_images(dir: &Path) -> CliResult<Vec<(PathBuf, ImageTensor)>> {
    if !dir.is_dir() {
        return Err(CliError::Missing(format!("image directory {}", dir.display())));
    }
    Ok(read_image_dir(dir)?)
}

pub fn cmd_score(ctx: &Context, dir: &Path, inputs: Option<&Path>) -> CliResult<()> {
    let images = list_images(dir)?;
    let weights = ctx.cfg.weights();
    let model = ctx.reward_model(weights)?;
    let label = dir_label(dir);
    let out_dir = ctx.out.join("scores");
    fs::create_dir_all(&out_dir)?;
    let extra = [format!("weights=pg:{},rf:{},vc:{}", weights.pg, weights.rf, weights.vc)];
    let mut csv = csv_with_hash(&out_dir.join(format!("{label}.csv")), &ctx.hash, &extra)?;
    let scorer_ids: Vec<String> =
        if weights.rf != 0.0 { model.scorers.iter().map(|s| format!("rf_{}", s.id())).collect() } else { Vec::new() };
    let mut header: Vec<String> = ["file", "l_rg", "l_rb", "l_gb", "r_a", "r_b", "r_pg", "r_rf", "r_vc"]
        .map(String::from)
        .to_vec();
    header.extend(scorer_ids);
    header.extend(["pg_term", "rf_term", "vc_term", "total"].map(String::from));
    csv.write_record(&header)?;
    for (path, img) in &images {
        let name = file_label(path);
        let input = match inputs {
            Some(d) => {
                let p = d.join(&name);
                if !p.exists() {
                    return Err(CliError::Missing(format!("input image {}", p.display())));
                }
                read_ppm(&p)?
            }
            None => img.clone(),
        };
        if !input.same_shape(img) {
            return Err(CliError::Core(Error::Dimension(format!("{name}: input and image shapes differ"))));
        }
        let key = format!("{label}/{name}");
        let b = model.score_with_stats(&channel_stats(&input), img, Some(&key))?;
        let p = &b.physics;
        let mut row = vec![name];
        row.extend([p.l_rg, p.l_rb, p.l_gb, p.r_a, p.r_b, b.r_pg, b.r_rf, b.r_vc].map(|v| v.to_string()));
        row.extend(b.quality.iter().map(|(_, v)| v.to_string()));
        row.extend(
            [weights.pg * b.r_pg, weights.rf * b.r_rf, weights.vc * b.r_vc, b.total].map(|v| v.to_string()),
        );
        csv.write_record(&row)?;
    }
    csv.flush()?;
    ctx.write_effective(&out_dir.join(format!("{label}.config.toml")))?;
    eprintln!("scored {} images -> {}", images.len(), out_dir.join(format!("{label}.csv")).display());
    Ok(())
}

const TAG_RESTORE: u64 = 0x41;

/// A sibling `clean/` directory holds references matched by file name.
/// Inside a corpus only `smoky/` is paired with it.
fn clean_references(dir: &Path, label: &str) -> Option<PathBuf> {
    let parent = dir.parent()?;
    let clean = parent.join("clean");
    let in_corpus = parent.join("manifest.json").exists();
    (clean.is_dir() && (!in_corpus || label == "smoky")).then_some(clean)
}

pub fn cmd_restore(ctx: &Context, dir: &Path, checkpoint: Option<&Path>, stochastic: bool) -> CliResult<()> {
    let images = list_images(dir)?;
    let ckpt = match checkpoint {
        Some(p) => load_checkpoint(p, "requested")?,
        None => {
            let refined = ctx.out.join("rpo").join("checkpoint.bin");
            let pretrained = ctx.pretrain_dir().join("checkpoint.bin");
            if refined.exists() {
                load_checkpoint(&refined, "rpo")?
            } else {
                load_checkpoint(&pretrained, "pretrain")?
            }
        }
    };
    let den = ckpt.denoiser()?;
    let sched = NoiseSchedule::new(ckpt.schedule)?;
    let label = dir_label(dir);
    let clean_dir = clean_references(dir, &label);
    let out_dir = ctx.out.join("restored").join(&label);
    fs::create_dir_all(&out_dir)?;
    let mut csv = csv_with_hash(&out_dir.join("restore.csv"), &ctx.hash, &[format!("stochastic={stochastic}")])?;
    if clean_dir.is_some() {
        csv.write_record(["file", "psnr_input", "psnr_restored"])?;
    } else {
        csv.write_record(["file"])?;
    }
    let comment = format!("config_hash={}", ctx.hash);
    let (mut sum_in, mut sum_out) = (0.0, 0.0);
    for (i, (path, img)) in images.iter().enumerate() {
        let cond = Arc::new(Condition::new(img, den.config().radius));
        let traj = if stochastic {
            let mut r = rng::stream(ctx.cfg.seed, &[TAG_RESTORE, i as u64]);
            rollout(&den, &ckpt.params, &sched, cond, NoiseMode::Stochastic(&mut r))?
        } else {
            rollout(&den, &ckpt.params, &sched, cond, NoiseMode::Deterministic)?
        };
        let name = file_label(path);
        write_ppm_with_comment(&out_dir.join(&name), &traj.final_image, &comment)?;
        match &clean_dir {
            Some(cd) => {
                let cp = cd.join(&name);
                if !cp.exists() {
                    return Err(CliError::Missing(format!("clean reference {}", cp.display())));
                }
                let clean = read_ppm(&cp)?;
                let (a, b) = (psnr(img, &clean)?, psnr(&traj.final_image, &clean)?);
                sum_in += a;
                sum_out += b;
                csv.write_record([name, a.to_string(), b.to_string()])?;
            }
            None => csv.write_record([name])?,
        }
    }
    csv.flush()?;
    ctx.write_effective(&out_dir.join("config.toml"))?;
    if clean_dir.is_some() && !images.is_empty() {
        let n = images.len() as f64;
        eprintln!("restored {} images: PSNR {:.2} dB -> {:.2} dB", images.len(), sum_in / n, sum_out / n);
    } else {
        eprintln!("restored {} images -> {}", images.len(), out_dir.display());
    }
    Ok(())
}
