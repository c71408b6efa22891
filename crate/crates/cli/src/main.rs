use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use alone::filter_bank::build_collision_free;
use alone::footprint::{render_table, render_tsv};
use alone::model_io::{load_frequency_list, load_trainer_state, read_embedding_text, store_trainer_state};
use alone::trainer::train_with;
use alone::{
    build_filter_bank, detect_assignment_collisions, evaluate_similarity, export_embeddings,
    footprint, load_embedding_text, load_model, store_model, AloneModel, ComposedEmbeddings,
    DatasetFormat, Delimiter, EmbeddingLookup, FilterBank, FilterConfig, FilterKind,
    FootprintInputs, Method, Precision, Sampling, SeedPlan, StoreOptions, TrainerConfig,
    TrainerState, WordPairDataset,
};

#[derive(Parser)]
#[command(name = "alone", version, about = "Compact word embeddings from one shared base vector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model to reconstruct pre-trained embeddings.
    Train(TrainArgs),
    /// Spearman's rho of cosine similarities against human scores.
    Eval(EvalArgs),
    /// Element counts of each storage scheme.
    Footprint(FootprintArgs),
    /// Write every composed embedding of a model as text.
    Export(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Target embeddings, one `word v1 ... vD` line per word.
    #[arg(long)]
    embeddings: PathBuf,
    /// Output model path. Companion files get `.loss.tsv`, `.manifest`,
    /// `.ckpt` and `.state` appended.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    d_inter: usize,
    /// Base embedding size; defaults to the target dimension.
    #[arg(long)]
    d_o: Option<usize>,
    #[arg(long, value_enum, default_value_t = FilterArg::Binary)]
    filter: FilterArg,
    /// Target fraction of zeros in a binary filter.
    #[arg(long, default_value_t = 0.5)]
    p_o: f64,
    /// Columns per source matrix.
    #[arg(long, default_value_t = 64)]
    c: usize,
    /// Number of source matrices.
    #[arg(long, default_value_t = 8)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    /// Dropout rate on the hidden layer.
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, value_enum, default_value_t = SamplingArg::Replacement)]
    sampling: SamplingArg,
    /// Keep the base embedding at its initial value.
    #[arg(long)]
    fix_o: bool,
    /// Keep only this many words.
    #[arg(long)]
    top_k: Option<usize>,
    /// Word ranking (one word per line, most frequent first) used to choose
    /// the top-k words instead of file order.
    #[arg(long, requires = "top_k")]
    frequency_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
    /// Store the filter sources instead of rebuilding them from the seed.
    #[arg(long)]
    store_sources: bool,
    /// Write a checkpoint every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from the checkpoint next to `--out`.
    #[arg(long)]
    resume: bool,
    /// Re-seed the filter bank until no two words share a source tuple.
    #[arg(long)]
    reseed_on_collision: bool,
    #[arg(long, default_value_t = 100)]
    max_reseeds: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    Binary,
    Real,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    Replacement,
    Shuffle,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
    model: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, required = true)]
    dataset: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = DelimiterArg::Whitespace)]
    delimiter: DelimiterArg,
    /// 0-based columns of the two words and the score.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0, 1, 2])]
    columns: Vec<usize>,
    #[arg(long)]
    skip_header: bool,
    #[arg(long)]
    no_lowercase: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DelimiterArg {
    Whitespace,
    Comma,
    Tab,
}

#[derive(Args)]
struct FootprintArgs {
    /// One of conventional, naive, proposed, volatile, or all.
    #[arg(default_value = "all")]
    method: String,
    #[arg(long, default_value_t = 300)]
    d_e: u64,
    #[arg(long, default_value_t = 5000)]
    vocab: u64,
    /// Defaults to `--d-e`.
    #[arg(long)]
    d_o: Option<u64>,
    #[arg(long, default_value_t = 600)]
    d_inter: u64,
    #[arg(long, default_value_t = 64)]
    c: u64,
    #[arg(long, default_value_t = 8)]
    m: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Table)]
    format: FormatArg,
    /// Bytes per element; adds a byte column.
    #[arg(long)]
    element_width: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Tsv,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Footprint(a) => run_footprint(a),
        Command::Export(a) => run_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_loss(path: &Path, history: &[f64]) -> Result<()> {
    let mut text = String::from("epoch\tloss\n");
    for (i, loss) in history.iter().enumerate() {
        let _ = writeln!(text, "{}\t{loss}", i + 1);
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let started = unix_now();
    let (table, duplicates) = read_embedding_text(&a.embeddings)
        .with_context(|| format!("reading {}", a.embeddings.display()))?;
    if duplicates > 0 {
        log::warn!("{duplicates} duplicate words in {}; kept the last occurrence", a.embeddings.display());
    }
    let targets = match (a.top_k, &a.frequency_file) {
        (Some(k), Some(freq)) => table.select_words(&load_frequency_list(freq)?, k),
        (Some(k), None) => table.top_k(k),
        (None, _) => table,
    };
    if targets.is_empty() {
        bail!("no target words left after selection");
    }
    log::info!("{} target words of dimension {}", targets.len(), targets.d_e());

    let plan = SeedPlan::new(a.seed);
    let kind = match a.filter {
        FilterArg::Binary => FilterKind::BinaryMask,
        FilterArg::Real => FilterKind::RealVector,
    };
    let filter_config = FilterConfig {
        d_o: a.d_o.unwrap_or(targets.d_e()),
        c: a.c,
        m: a.m,
        kind,
        p_o: a.p_o,
        seed: plan.filter(),
    };
    let trainer_config = TrainerConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        beta1: a.beta1,
        beta2: a.beta2,
        epsilon: a.epsilon,
        dropout_rate: a.dropout,
        train_base: !a.fix_o,
        data_seed: plan.data(),
        sampling: match a.sampling {
            SamplingArg::Replacement => Sampling::WithReplacement,
            SamplingArg::Shuffle => Sampling::Shuffle,
        },
    };
    trainer_config.validate()?;

    let ckpt_path = with_suffix(&a.out, ".ckpt");
    let state_path = with_suffix(&a.out, ".state");
    let (mut model, bank, mut state, reseeds) = if a.resume {
        let loaded = load_model(&ckpt_path).with_context(|| format!("reading {}", ckpt_path.display()))?;
        if loaded.model.vocab() != targets.vocab() {
            bail!("checkpoint vocabulary does not match the selected target words");
        }
        let state = load_trainer_state(&state_path)
            .with_context(|| format!("reading {}", state_path.display()))?;
        log::info!("resuming after epoch {}", state.loss_history.len());
        (loaded.model, loaded.bank, state, 0)
    } else {
        let (bank, reseeds) = if a.reseed_on_collision {
            build_collision_free(filter_config, targets.len(), a.max_reseeds)?
        } else {
            let bank = build_filter_bank(filter_config, targets.len())?;
            let collisions = detect_assignment_collisions(&bank).len();
            if collisions > 0 {
                log::warn!("{collisions} word pairs share a source tuple; see --reseed-on-collision");
            }
            (bank, 0)
        };
        let model = AloneModel::new(
            *bank.config(),
            targets.vocab().to_vec(),
            a.d_inter,
            targets.d_e(),
            plan.weights(),
            !a.fix_o,
        )?;
        let state = TrainerState::new(&model);
        (model, bank, state, reseeds)
    };

    let done = state.loss_history.len();
    let run_config = TrainerConfig {
        epochs: a.epochs.saturating_sub(done),
        // A resumed run continues with a data stream keyed to its progress.
        data_seed: trainer_config.data_seed.wrapping_add(2 * done as u64),
        ..trainer_config
    };
    let checkpoint = |model: &AloneModel, bank: &FilterBank, state: &TrainerState| -> alone::Result<()> {
        store_model(model, bank, &ckpt_path, &StoreOptions::default())?;
        store_trainer_state(state, &state_path)
    };
    let result = train_with(&mut model, &bank, &targets, &run_config, &mut state, |r, m, s| {
        if r.epoch % 50 == 0 || r.epoch == a.epochs {
            log::info!("epoch {} loss {:.6}", r.epoch, r.loss);
        }
        match a.checkpoint_every {
            Some(n) if n > 0 && r.epoch % n == 0 => checkpoint(m, &bank, s),
            _ => Ok(()),
        }
    });
    if let Err(e) = result {
        checkpoint(&model, &bank, &state)?;
        write_loss(&with_suffix(&a.out, ".loss.tsv"), &state.loss_history)?;
        return Err(anyhow::Error::new(e).context(format!(
            "training stopped after epoch {}; progress saved to {}",
            state.loss_history.len(),
            ckpt_path.display()
        )));
    }

    let precision = match a.precision {
        PrecisionArg::F64 => Precision::F64,
        PrecisionArg::F32 => Precision::F32,
    };
    let hyper: Vec<(&str, String)> = vec![
        ("learning_rate", a.learning_rate.to_string()),
        ("beta1", a.beta1.to_string()),
        ("beta2", a.beta2.to_string()),
        ("epsilon", a.epsilon.to_string()),
        ("batch_size", a.batch_size.to_string()),
        ("epochs", a.epochs.to_string()),
        ("dropout", a.dropout.to_string()),
        ("seed", a.seed.to_string()),
    ];
    let options = StoreOptions {
        volatile: !a.store_sources,
        precision,
        metadata: hyper.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    };
    store_model(&model, &bank, &a.out, &options).with_context(|| format!("writing {}", a.out.display()))?;
    let loss_path = with_suffix(&a.out, ".loss.tsv");
    write_loss(&loss_path, &state.loss_history)?;

    let mut manifest = String::new();
    let mut kv = |k: &str, v: &dyn std::fmt::Display| {
        let _ = writeln!(manifest, "{k}={v}");
    };
    kv("version", &env!("CARGO_PKG_VERSION"));
    kv("embeddings", &a.embeddings.display());
    kv("model", &a.out.display());
    kv("loss", &loss_path.display());
    kv("words", &targets.len());
    kv("d_e", &targets.d_e());
    kv("d_o", &model.d_o());
    kv("d_inter", &model.d_inter());
    kv("filter", &kind.as_str());
    kv("p_o", &a.p_o);
    kv("c", &a.c);
    kv("m", &a.m);
    kv("seed", &a.seed);
    kv("filter_seed", &bank.config().seed);
    kv("init_seed", &model.init_seed());
    kv("data_seed", &trainer_config.data_seed);
    kv("dropout_seed", &trainer_config.dropout_seed());
    kv("reseeds", &reseeds);
    kv("train_o", &!a.fix_o);
    kv("sampling", &match a.sampling {
        SamplingArg::Replacement => "replacement",
        SamplingArg::Shuffle => "shuffle",
    });
    for (k, v) in &hyper {
        kv(k, v);
    }
    kv("precision", &precision.as_str());
    kv("volatile", &!a.store_sources);
    kv("resumed", &a.resume);
    kv("final_loss", &state.loss_history.last().copied().unwrap_or(f64::NAN));
    kv("started_unix", &started);
    kv("finished_unix", &unix_now());
    let manifest_path = with_suffix(&a.out, ".manifest");
    std::fs::write(&manifest_path, manifest).with_context(|| format!("writing {}", manifest_path.display()))?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let format = DatasetFormat {
        delimiter: match a.delimiter {
            DelimiterArg::Whitespace => Delimiter::Whitespace,
            DelimiterArg::Comma => Delimiter::Comma,
            DelimiterArg::Tab => Delimiter::Tab,
        },
        word_a: a.columns[0],
        word_b: a.columns[1],
        score: a.columns[2],
        skip_header: a.skip_header,
        lowercase: !a.no_lowercase,
    };
    let loaded;
    let table;
    let composed;
    let lookup: &dyn EmbeddingLookup = match (&a.model, &a.embeddings) {
        (Some(path), _) => {
            loaded = load_model(path).with_context(|| format!("reading {}", path.display()))?;
            composed = ComposedEmbeddings {
                model: &loaded.model,
                bank: &loaded.bank,
            };
            &composed
        }
        (None, Some(path)) => {
            table = load_embedding_text(path).with_context(|| format!("reading {}", path.display()))?;
            &table
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    for path in &a.dataset {
        let dataset = WordPairDataset::load(path, &format).with_context(|| format!("reading {}", path.display()))?;
        let report = evaluate_similarity(lookup, &dataset).with_context(|| format!("evaluating {}", dataset.name))?;
        println!(
            "{}\trho={:.4}\tused={}\tskipped={}",
            dataset.name,
            report.rho,
            report.pairs_used,
            report.pairs_skipped()
        );
    }
    Ok(())
}

fn run_footprint(a: FootprintArgs) -> Result<()> {
    let methods: Vec<Method> = if a.method == "all" {
        Method::ALL.to_vec()
    } else {
        vec![a.method.parse()?]
    };
    let inputs = FootprintInputs {
        d_e: a.d_e,
        vocab: a.vocab,
        d_o: a.d_o.unwrap_or(a.d_e),
        d_inter: a.d_inter,
        c: a.c,
        m: a.m,
    };
    let reports = methods
        .into_iter()
        .map(|m| footprint(m, &inputs))
        .collect::<alone::Result<Vec<_>>>()?;
    let text = match a.format {
        FormatArg::Table => render_table(&reports, a.element_width),
        FormatArg::Tsv => render_tsv(&reports, a.element_width),
    };
    print!("{text}");
    Ok(())
}

fn run_export(a: ExportArgs) -> Result<()> {
    let loaded = load_model(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    export_embeddings(&loaded.model, &loaded.bank, &a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    log::info!("wrote {} embeddings to {}", loaded.model.vocab().len(), a.out.display());
    Ok(())
}
