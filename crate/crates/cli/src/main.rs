//! `scenecap` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scenecap::captioner::{attention_heatmap, beam_decode, patch_word_match, CaptionModel};
use scenecap::harness::{
    evaluate, generate, read_records, retrieval_eval, synth_dataset, train_with, write_records,
    Checkpoint, DatasetRecord, Prepared, Splits, SynthSpec, TrainConfig,
};
use scenecap::scene::{lda_fit, lda_infer, scene_mlp_train, LdaConfig, LdaModel, SceneMlp, SceneMlpTraining};
use scenecap::textmetrics::tokenize;

#[derive(Parser)]
#[command(name = "scenecap", version, about = "Region-attention, scene-factorized caption decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-scene corpus and its split file.
    Synth(SynthArgs),
    /// Fit LDA to captions; optionally annotate records with scene vectors.
    LdaFit(LdaArgs),
    /// Train the scene MLP from global features to stored scene vectors.
    SceneTrain(SceneTrainArgs),
    /// Train the caption decoder.
    Train(TrainArgs),
    /// Beam-decode captions for a split.
    Generate(DecodeArgs),
    /// Beam-decode a split and score it against its references.
    Evaluate(DecodeArgs),
    /// Caption-to-image and image-to-caption retrieval on a split.
    Retrieve(RetrieveArgs),
    /// Write per-step attention heatmaps for one image.
    Heatmap(HeatmapArgs),
    /// Report the region attended when each given word is emitted.
    MatchWords(MatchArgs),
}

/// Dataset file plus an optional split selection.
#[derive(Args)]
struct DataArgs {
    /// Line-delimited JSON records.
    #[arg(long)]
    data: PathBuf,
    /// Split file (`<split> <image_id>` per line); all records if absent.
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

impl DataArgs {
    fn load(&self) -> Result<Vec<DatasetRecord>> {
        let records = read_records(&self.data).with_context(|| format!("reading {}", self.data.display()))?;
        match &self.splits {
            None => Ok(records),
            Some(path) => Ok(load_splits(path)?.select(&self.split, &records)?),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory for `data.jsonl` and `splits.txt`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    vocab_per_scene: Option<usize>,
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    global_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    mixed_fraction: Option<f64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Args)]
struct LdaArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 4)]
    topics: usize,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    /// Document-topic prior; defaults to 50 / topics.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output LDA model file.
    #[arg(long)]
    out: PathBuf,
    /// Write every record of `--data` with its inferred scene vector here.
    #[arg(long)]
    annotate: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    infer_iterations: usize,
    #[arg(long, default_value_t = 10)]
    infer_burn_in: usize,
}

#[derive(Args)]
struct SceneTrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Hidden layer widths, comma-separated.
    #[arg(long, default_value = "64")]
    hidden: String,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output scene MLP file.
    #[arg(long)]
    out: PathBuf,
}

/// Overrides for every `TrainConfig` field except the seed.
#[derive(Args, Default)]
struct ConfigFlags {
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    embed: Option<String>,
    #[arg(long)]
    rank: Option<String>,
    #[arg(long)]
    topics: Option<String>,
    #[arg(long)]
    regions: Option<String>,
    #[arg(long)]
    attention_hidden: Option<String>,
    #[arg(long)]
    minibatch: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    beam: Option<String>,
    #[arg(long)]
    max_epochs: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    min_freq: Option<String>,
    #[arg(long)]
    max_len: Option<String>,
    #[arg(long)]
    factorize_cell: Option<String>,
    #[arg(long)]
    factorized_layers: Option<String>,
    #[arg(long)]
    attention_uses_bottom_hidden: Option<String>,
}

impl ConfigFlags {
    fn apply(&self, config: &mut TrainConfig) -> Result<()> {
        let pairs = [
            ("hidden", &self.hidden),
            ("embed", &self.embed),
            ("rank", &self.rank),
            ("topics", &self.topics),
            ("regions", &self.regions),
            ("attention_hidden", &self.attention_hidden),
            ("minibatch", &self.minibatch),
            ("learning_rate", &self.learning_rate),
            ("beam", &self.beam),
            ("max_epochs", &self.max_epochs),
            ("max_steps", &self.max_steps),
            ("patience", &self.patience),
            ("mode", &self.mode),
            ("min_freq", &self.min_freq),
            ("max_len", &self.max_len),
            ("factorize_cell", &self.factorize_cell),
            ("factorized_layers", &self.factorized_layers),
            ("attention_uses_bottom_hidden", &self.attention_uses_bottom_hidden),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                config.set(key, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    #[arg(long, default_value = "train")]
    train_split: String,
    #[arg(long, default_value = "val")]
    val_split: String,
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Scene MLP used for records without a stored scene vector.
    #[arg(long)]
    scene_mlp: Option<PathBuf>,
    /// LDA model the scene vectors came from, recorded in the checkpoint.
    #[arg(long)]
    lda_model: Option<PathBuf>,
    /// Output directory for `checkpoint.json`, `history.json` and `config.txt`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Defaults to the checkpoint's configured beam.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    image_id: String,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long)]
    max_len: Option<usize>,
    /// Directory for one PGM file per decoded word.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    image_id: String,
    /// Sentence to align; defaults to the record's first caption.
    #[arg(long)]
    caption: Option<String>,
    /// Words to match; every word of the sentence if none given.
    #[arg(long = "word")]
    words: Vec<String>,
    /// Optional report directory for `matches.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scenecap: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::LdaFit(a) => lda(a),
        Command::SceneTrain(a) => scene_train(a),
        Command::Train(a) => train_cmd(a),
        Command::Generate(a) => decode_cmd(a, false),
        Command::Evaluate(a) => decode_cmd(a, true),
        Command::Retrieve(a) => retrieve(a),
        Command::Heatmap(a) => heatmap(a),
        Command::MatchWords(a) => match_words(a),
    }
}

fn load_splits(path: &Path) -> Result<Splits> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Splits::parse(&text)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec {
        seed: a.seed,
        ..SynthSpec::default()
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    set!(scenes, vocab_per_scene, slots, regions, feature_dim, global_dim, noise, mixed_fraction, train, val, test);
    let data = synth_dataset(&spec)?;
    create_dir(&a.out)?;
    write_records(&a.out.join("data.jsonl"), &data.all())?;
    write(&a.out.join("splits.txt"), &data.splits().render())?;
    println!(
        "wrote {} train, {} val, {} test records to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

fn lda(a: LdaArgs) -> Result<()> {
    let records = a.data.load()?;
    let docs: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.captions.join(" "))).collect();
    let config = LdaConfig {
        topics: a.topics,
        alpha: a.alpha,
        beta: a.beta,
        iterations: a.iterations,
        seed: a.seed,
    };
    let model = lda_fit(&docs, &config)?;
    write(&a.out, &model.to_json()?)?;
    println!("fitted {} topics over {} words", model.topics, model.vocabulary.len());
    if let Some(path) = a.annotate {
        let mut all = read_records(&a.data.data)?;
        for (i, rec) in all.iter_mut().enumerate() {
            let doc = tokenize(&rec.captions.join(" "));
            if doc.is_empty() {
                continue;
            }
            let seed = a.seed.wrapping_add(i as u64);
            rec.scene = Some(
                lda_infer(&model, &doc, a.infer_iterations, a.infer_burn_in, seed)
                    .with_context(|| format!("inferring scene for {}", rec.image_id))?,
            );
        }
        write_records(&path, &all)?;
        println!("annotated {} records", all.len());
    }
    Ok(())
}

fn scene_train(a: SceneTrainArgs) -> Result<()> {
    let records = a.data.load()?;
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for rec in &records {
        let g = rec
            .global_feature
            .clone()
            .ok_or_else(|| anyhow!("record {} has no global feature", rec.image_id))?;
        let s = rec
            .scene
            .clone()
            .ok_or_else(|| anyhow!("record {} has no scene vector", rec.image_id))?;
        features.push(g);
        targets.push(s);
    }
    let hidden = a
        .hidden
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<usize>().map_err(|_| anyhow!("bad hidden width {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    let mut training = SceneMlpTraining {
        hidden,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ..SceneMlpTraining::default()
    };
    training.adam.learning_rate = a.learning_rate;
    let trained = scene_mlp_train(&features, &targets, &training)?;
    write(&a.out, &serde_json::to_string(&trained.mlp)?)?;
    println!(
        "scene MLP loss {:.6} -> {:.6}",
        trained.loss_trace[0],
        trained.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = TrainConfig::default();
    let mut topics_given = a.flags.topics.is_some();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        config.apply_text(&text)?;
        topics_given |= text
            .lines()
            .any(|l| l.split('#').next().unwrap_or("").split_once('=').is_some_and(|(k, _)| k.trim() == "topics"));
    }
    a.flags.apply(&mut config)?;
    config.seed = a.seed;

    let records = read_records(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let splits = load_splits(&a.splits)?;
    let train_set = splits.select(&a.train_split, &records)?;
    let val_set = splits.select(&a.val_split, &records)?;
    let mlp: Option<SceneMlp> = match &a.scene_mlp {
        None => None,
        Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?),
    };
    // Unset topic count follows the stored scene vectors, then the scene MLP.
    if !topics_given {
        let stored = train_set.iter().find_map(|r| r.scene.as_ref().map(|s| s.len()));
        if let Some(k) = stored.or(mlp.as_ref().map(|m| m.topics())) {
            config.topics = k;
        }
    }
    config.validate()?;
    if let Some(p) = &a.lda_model {
        LdaModel::from_json(&fs::read_to_string(p)?).with_context(|| format!("loading {}", p.display()))?;
    }
    create_dir(&a.out)?;
    write(&a.out.join("config.txt"), &config.to_text())?;
    let ckpt_path = a.out.join("checkpoint.json");
    let lda_ref = a.lda_model.as_ref().map(|p| p.display().to_string());
    let ckpt = train_with(&config, &train_set, &val_set, mlp, |c| {
        let mut c = c.clone();
        c.lda_model = lda_ref.clone();
        c.save(&ckpt_path)?;
        Ok(())
    })?;
    let mut ckpt = ckpt;
    ckpt.lda_model = lda_ref;
    ckpt.save(&ckpt_path)?;
    write(&a.out.join("history.json"), &serde_json::to_string_pretty(&ckpt.history)?)?;
    for r in &ckpt.history {
        println!(
            "epoch {:>3} steps {:>6} train {:.4} val {:.4} bleu1 {:.4}{}",
            r.epoch,
            r.steps,
            r.train_loss,
            r.val_loss,
            r.val_bleu1,
            if r.improved { " *" } else { "" }
        );
    }
    println!("best validation BLEU-1 {:.4}; checkpoint {}", ckpt.best_bleu1().unwrap_or(0.0), ckpt_path.display());
    Ok(())
}

fn captions_jsonl(captions: &[scenecap::harness::GeneratedCaption]) -> Result<String> {
    let mut out = String::new();
    for c in captions {
        out.push_str(&serde_json::to_string(c)?);
        out.push('\n');
    }
    Ok(out)
}

fn decode_cmd(a: DecodeArgs, score: bool) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let records = a.data.load()?;
    let beam = a.beam.unwrap_or(ckpt.config.beam);
    let max_len = a.max_len.unwrap_or(ckpt.config.max_len);
    create_dir(&a.out)?;
    if score {
        let eval = evaluate(&ckpt, &records, beam, max_len)?;
        write(&a.out.join("captions.jsonl"), &captions_jsonl(&eval.captions)?)?;
        write(&a.out.join("report.json"), &serde_json::to_string_pretty(&eval.report)?)?;
        let text = eval.report.to_text();
        write(&a.out.join("report.txt"), &text)?;
        print!("{text}");
    } else {
        let model = ckpt.model()?;
        let set = Prepared::new(&records, &ckpt.vocabulary, &model, ckpt.scene_mlp.as_ref())?;
        let captions = generate(&model, &set, &ckpt.vocabulary, beam, max_len)?;
        write(&a.out.join("captions.jsonl"), &captions_jsonl(&captions)?)?;
        for c in &captions {
            println!("{}\t{}", c.image_id, c.caption);
        }
    }
    Ok(())
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let records = a.data.load()?;
    let model = ckpt.model()?;
    let set = Prepared::new(&records, &ckpt.vocabulary, &model, ckpt.scene_mlp.as_ref())?;
    let report = retrieval_eval(&model, &set)?;
    create_dir(&a.out)?;
    write(&a.out.join("retrieval.json"), &serde_json::to_string_pretty(&report)?)?;
    for (name, s) in [("caption->image", &report.caption_to_image), ("image->caption", &report.image_to_caption)] {
        println!(
            "{name}: R@1 {:.4} R@5 {:.4} R@10 {:.4} median rank {}",
            s.r1, s.r5, s.r10, s.median_rank
        );
    }
    Ok(())
}

/// Checkpoint, decoder and the single record `image_id` resolved into inputs.
fn single_image(checkpoint: &Path, data: &Path, image_id: &str) -> Result<(Checkpoint, CaptionModel, DatasetRecord, Prepared)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model()?;
    let record = read_records(data)?
        .into_iter()
        .find(|r| r.image_id == image_id)
        .ok_or_else(|| anyhow!("image {image_id} not in {}", data.display()))?;
    let set = Prepared::new(std::slice::from_ref(&record), &ckpt.vocabulary, &model, ckpt.scene_mlp.as_ref())?;
    Ok((ckpt, model, record, set))
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let (ckpt, model, record, set) = single_image(&a.checkpoint, &a.data, &a.image_id)?;
    if !model.has_attention() {
        bail!("checkpoint model has no region attention");
    }
    let (w, h) = record.image_size()?;
    let max_len = a.max_len.unwrap_or(ckpt.config.max_len);
    let hyps = beam_decode(&model, &set.regions[0], set.scenes[0].as_ref(), a.beam, max_len)?;
    let best = &hyps[0].decoded;
    let grids = attention_heatmap(&best.attention, set.regions[0].boxes(), w, h)?;
    create_dir(&a.out)?;
    let words = ckpt.vocabulary.decode(&best.tokens)?;
    for (t, (grid, word)) in grids.iter().zip(&words).enumerate() {
        let safe: String = word.chars().map(|c| if c.is_alphanumeric() { c } else { '_' }).collect();
        write(&a.out.join(format!("step_{t:02}_{safe}.pgm")), &grid.to_pgm())?;
    }
    let caption = ckpt.vocabulary.decode(best.content())?.join(" ");
    write(&a.out.join("caption.txt"), &format!("{caption}\n"))?;
    println!("{caption}\nwrote {} heatmaps to {}", grids.len(), a.out.display());
    Ok(())
}

fn match_words(a: MatchArgs) -> Result<()> {
    let (ckpt, model, record, set) = single_image(&a.checkpoint, &a.data, &a.image_id)?;
    let sentence = match &a.caption {
        Some(c) => tokenize(c),
        None => record
            .tokenized_captions()
            .into_iter()
            .find(|c| !c.is_empty())
            .ok_or_else(|| anyhow!("record {} has no caption; pass --caption", record.image_id))?,
    };
    let encoded = ckpt.vocabulary.encode(&sentence);
    let words = if a.words.is_empty() { sentence.clone() } else { a.words.clone() };
    let mut report = String::new();
    for word in &words {
        let id = ckpt
            .vocabulary
            .id(word)
            .ok_or_else(|| anyhow!("word {word:?} not in the vocabulary"))?;
        if !sentence.contains(word) {
            bail!("word {word:?} does not occur in the caption {:?}", sentence.join(" "));
        }
        let m = patch_word_match(&model, &set.regions[0], set.scenes[0].as_ref(), &encoded, id)
            .with_context(|| format!("matching {word:?}"))?;
        report.push_str(&format!(
            "{word}\tposition {}\tregion {}\tbox {} {} {} {}\tweight {:.6}\n",
            m.position, m.region, m.bbox.x, m.bbox.y, m.bbox.width, m.bbox.height, m.weight
        ));
    }
    print!("{report}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write(&dir.join("matches.txt"), &report)?;
    }
    Ok(())
}
