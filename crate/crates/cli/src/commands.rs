use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use citeintent::backend::load_mlm;
use citeintent::corpus::{
    default_section_map, ingest_sections, read_paper_stream, IngestOptions, LabelSectionMap,
    SectionAliases, SectionCorpus,
};
use citeintent::dataset::{load_dataset, CitationInstance, Dataset, LabelSchema, Split};
use citeintent::embedding::InMemoryEmbeddings;
use citeintent::experiment::{run_experiment, run_seed, support_texts, EvalReport, ExperimentInputs};
use citeintent::kpt::{estimate_priors, refine_pipeline, SupportDistributions};
use citeintent::prompt::{classify, MaskedLanguageModel, PromptTemplate};
use citeintent::train::Regime;
use citeintent::verbalizer::{build_verbalizer, default_anchors, load_verbalizer, save_verbalizer, AnchorSet, Verbalizer};
use citeintent::{Error, Result, TOOL_VERSION};

use crate::config::{require_exists, required, RunConfig};
use crate::{Cli, Command};

struct Context {
    config: RunConfig,
    schema: LabelSchema,
    template: PromptTemplate,
}

impl Context {
    fn mlm(&self) -> Result<Box<dyn MaskedLanguageModel>> {
        let id = required(self.config.mlm.as_deref(), "mlm")?;
        load_mlm(id)
    }

    fn verbalizer(&self) -> Result<Verbalizer> {
        let path = required(self.config.verbalizer.path.as_deref(), "verbalizer.path")?;
        require_exists("verbalizer.path", path)?;
        let v = load_verbalizer(path)?;
        v.ensure_schema(&self.schema)?;
        Ok(v)
    }

    fn dataset(&self, path: Option<&Path>, key: &str, split: Split) -> Result<Dataset> {
        let path = required(path, key)?;
        load_dataset(path, &self.schema, split)
    }

    fn out_or(&self, out: &Option<PathBuf>, default: &str) -> PathBuf {
        out.clone().unwrap_or_else(|| self.config.output_dir.join(default))
    }
}

fn parse_regime(s: &str) -> Result<Regime> {
    s.parse()
}

/// Applies global and per-command flags on top of the config file.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &cli.schema {
        c.schema = s.clone();
    }
    if let Some(m) = &cli.mlm {
        c.mlm = Some(m.clone());
    }
    if let Some(seed) = cli.seed {
        c.train.seeds = vec![seed];
    }
    match &cli.command {
        Command::IngestCorpus(a) => {
            set(&mut c.corpus.input, &a.input);
            set(&mut c.corpus.section_aliases, &a.section_aliases);
            if let Some(q) = a.quota {
                c.corpus.quota = q;
            }
            if a.field_of_study.is_some() {
                c.corpus.field_of_study = a.field_of_study.clone();
            }
        }
        Command::BuildVerbalizer(a) => {
            set(&mut c.corpus.archive, &a.corpus);
            set(&mut c.verbalizer.embeddings, &a.embeddings);
            set(&mut c.verbalizer.anchors, &a.anchors);
            set(&mut c.verbalizer.section_map, &a.section_map);
            if let Some(k) = a.k {
                c.verbalizer.k = k;
            }
        }
        Command::RefineVerbalizer(a) => {
            set(&mut c.verbalizer.path, &a.verbalizer);
            set(&mut c.data.train, &a.support);
            let r = &mut c.refinement;
            if let Some(v) = a.support_size {
                r.support_size = v;
            }
            if let Some(v) = a.frequency_quantile {
                r.frequency_quantile = v;
            }
            if let Some(v) = a.relevance_threshold {
                r.relevance_threshold = v;
            }
            if let Some(v) = a.min_words_per_label {
                r.min_words_per_label = v;
            }
        }
        Command::Train(a) => {
            set(&mut c.verbalizer.path, &a.verbalizer);
            set(&mut c.data.train, &a.train);
            if let Some(r) = &a.regime {
                c.train.regime = parse_regime(r)?;
            }
            if let Some(e) = a.epochs {
                c.train.epochs = e;
            }
            if let Some(b) = a.batch_size {
                c.train.batch_size = b;
            }
            if let Some(lr) = a.learning_rate {
                c.train.learning_rate = lr;
            }
        }
        Command::Evaluate(a) => {
            set(&mut c.verbalizer.path, &a.verbalizer);
            set(&mut c.data.train, &a.train);
            set(&mut c.data.test, &a.test);
            if let Some(r) = &a.regime {
                c.train.regime = parse_regime(r)?;
            }
            if let Some(e) = a.epochs {
                c.train.epochs = e;
            }
            if a.calibrate {
                c.train.calibrate = Some(true);
            } else if a.no_calibrate {
                c.train.calibrate = Some(false);
            }
        }
        Command::Predict(a) => {
            set(&mut c.verbalizer.path, &a.verbalizer);
        }
        Command::Report(_) => {}
    }
    if let Some(out) = &cli.out {
        c.output_dir = out.clone();
    }
    c.validate()?;
    Ok(c)
}

fn set(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let config = resolve(cli)?;
    let ctx = Context {
        schema: LabelSchema::builtin(&config.schema)?,
        template: PromptTemplate::from_pattern(&config.template)?,
        config,
    };
    match &cli.command {
        Command::IngestCorpus(_) => ingest(&ctx, &cli.out),
        Command::BuildVerbalizer(_) => build(&ctx, &cli.out),
        Command::RefineVerbalizer(_) => refine(&ctx, &cli.out),
        Command::Train(_) => train(&ctx, &cli.out),
        Command::Evaluate(_) => evaluate(&ctx, &cli.out),
        Command::Predict(a) => predict(&ctx, a.input.as_deref(), a.calibrate),
        Command::Report(a) => report(&ctx, a.input.as_deref(), &cli.out),
    }
}

fn ingest(ctx: &Context, out: &Option<PathBuf>) -> Result<()> {
    let c = &ctx.config.corpus;
    let input = required(c.input.as_deref(), "corpus.input")?;
    require_exists("corpus.input", input)?;
    let mut opts = IngestOptions::new(c.quota);
    opts.field_of_study = c.field_of_study.clone();
    if let Some(p) = &c.section_aliases {
        let mut aliases = SectionAliases::default();
        aliases.extend_from_file(p)?;
        opts.aliases = aliases;
    }
    let corpus = ingest_sections(read_paper_stream(input)?, &opts)?;
    let dir = out.clone().or_else(|| c.archive.clone()).unwrap_or_else(|| ctx.config.output_dir.join("corpus"));
    let manifest = corpus.save_with_config(&dir, Some(ctx.config.snapshot()))?;
    let mut stdout = io::stdout().lock();
    for (section, fill) in &manifest.sections {
        let _ = writeln!(stdout, "{:<14} {fill}/{}", section.as_str(), manifest.quota);
    }
    let _ = writeln!(stdout, "papers consumed: {}, skipped records: {}", manifest.papers_consumed, manifest.skipped_records);
    let _ = writeln!(stdout, "corpus written to {}", dir.display());
    Ok(())
}

fn build(ctx: &Context, out: &Option<PathBuf>) -> Result<()> {
    let c = &ctx.config;
    let archive = c
        .corpus
        .archive
        .clone()
        .unwrap_or_else(|| c.output_dir.join("corpus"));
    require_exists("corpus.archive", &archive)?;
    let corpus = SectionCorpus::load(&archive)?;
    let vectors = required(c.verbalizer.embeddings.as_deref(), "verbalizer.embeddings")?;
    let embedder = InMemoryEmbeddings::load_text(vectors)?;
    let anchors = match &c.verbalizer.anchors {
        Some(p) => AnchorSet::from_file(&ctx.schema, p)?,
        None => default_anchors(&ctx.schema)?,
    };
    let section_map = match &c.verbalizer.section_map {
        Some(p) => LabelSectionMap::from_file(&ctx.schema, p)?,
        None => default_section_map(&ctx.schema)?,
    };
    let mut v = build_verbalizer(&ctx.schema, &anchors, &section_map, &corpus, &embedder, c.verbalizer.k)?;
    v.manifest_mut().config = Some(c.snapshot());
    let path = out.clone().unwrap_or_else(|| c.output_dir.join("verbalizer.json"));
    write_parent(&path)?;
    save_verbalizer(&v, &path)?;
    print_sizes(&v);
    println!("verbalizer written to {}", path.display());
    Ok(())
}

fn print_sizes(v: &Verbalizer) {
    for (label, entries) in v.iter() {
        println!("{:<18} {}", label.as_str(), entries.len());
    }
}

fn refine(ctx: &Context, out: &Option<PathBuf>) -> Result<()> {
    let c = &ctx.config;
    let v = ctx.verbalizer()?;
    let mlm = ctx.mlm()?;
    let support_set = ctx.dataset(c.data.train.as_deref(), "data.train", Split::Train)?;
    let seed = c.train.seeds[0];
    let texts = support_texts(&support_set, c.refinement.support_size, seed);
    let support = SupportDistributions::compute(mlm.as_ref(), &ctx.template, &texts, c.train.max_sequence_length)?;
    let mut refined = refine_pipeline(&v, &support, &c.refinement)?.verbalizer;
    refined.manifest_mut().config = Some(c.snapshot());
    let path = out.clone().unwrap_or_else(|| c.output_dir.join("verbalizer.refined.json"));
    write_parent(&path)?;
    save_verbalizer(&refined, &path)?;
    print_sizes(&refined);
    println!("refined verbalizer written to {}", path.display());
    Ok(())
}

/// Saves the checkpoint with the run config and tool version added under
/// `provenance`.
fn save_model(mlm: &dyn MaskedLanguageModel, path: &Path, config: &serde_json::Value) -> Result<()> {
    mlm.save(path)?;
    let raw = fs::read_to_string(path).map_err(|e| data_io(path, e))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
    if let Some(obj) = value.as_object_mut() {
        obj.insert(
            "provenance".into(),
            serde_json::json!({ "tool_version": TOOL_VERSION, "config": config }),
        );
    }
    let body = serde_json::to_string(&value).map_err(|e| Error::Model(e.to_string()))? + "\n";
    fs::write(path, body).map_err(|e| data_io(path, e))
}

fn data_io(path: &Path, e: io::Error) -> Error {
    Error::InvalidData(format!("{}: {e}", path.display()))
}

fn write_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| data_io(dir, e))?;
    }
    Ok(())
}

fn train(ctx: &Context, out: &Option<PathBuf>) -> Result<()> {
    let c = &ctx.config;
    if c.train.regime == Regime::ZeroShot {
        return Err(Error::InvalidArgument("zero-shot runs have nothing to train; use `evaluate`".into()));
    }
    let v = ctx.verbalizer()?;
    let mlm = ctx.mlm()?;
    let train_set = ctx.dataset(c.data.train.as_deref(), "data.train", Split::Train)?;
    let dir = ctx.out_or(out, "model");
    fs::create_dir_all(&dir).map_err(|e| data_io(&dir, e))?;
    let mut tc = c.train.clone();
    tc.divergence_dump = Some(dir.clone());
    tc.calibrate = Some(false);
    let seed = tc.seeds[0];
    let inputs = ExperimentInputs {
        mlm: mlm.as_ref(),
        verbalizer: &v,
        template: &ctx.template,
        train: Some(&train_set),
        test: &train_set,
        support_size: c.refinement.support_size,
    };
    let run = run_seed(&inputs, &tc, seed)?;
    let snapshot = c.snapshot();
    let model_path = dir.join("model.json");
    save_model(run.model.as_ref(), &model_path, &snapshot)?;
    let mut trained = run.verbalizer;
    trained.manifest_mut().config = Some(snapshot.clone());
    save_verbalizer(&trained, dir.join("verbalizer.json"))?;
    let summary = serde_json::json!({
        "tool_version": TOOL_VERSION,
        "config": snapshot,
        "seed": seed,
        "regime": c.train.regime,
        "train_size": run.train_size,
        "epoch_losses": run.epoch_losses,
        "model_fingerprint": run.model.parameter_fingerprint(),
    });
    let p = dir.join("train.json");
    fs::write(&p, serde_json::to_string_pretty(&summary).unwrap_or_default() + "\n").map_err(|e| data_io(&p, e))?;
    for (i, l) in run.epoch_losses.iter().enumerate() {
        println!("epoch {}: loss {l:.6}", i + 1);
    }
    println!("model written to {}", model_path.display());
    Ok(())
}

fn evaluate(ctx: &Context, out: &Option<PathBuf>) -> Result<()> {
    let c = &ctx.config;
    let v = ctx.verbalizer()?;
    let mlm = ctx.mlm()?;
    let test = ctx.dataset(c.data.test.as_deref(), "data.test", Split::Test)?;
    let train = match &c.data.train {
        Some(p) => Some(load_dataset(p, &ctx.schema, Split::Train)?),
        None => None,
    };
    let inputs = ExperimentInputs {
        mlm: mlm.as_ref(),
        verbalizer: &v,
        template: &ctx.template,
        train: train.as_ref(),
        test: &test,
        support_size: c.refinement.support_size,
    };
    let report = run_experiment(&inputs, &c.train, c.snapshot())?;
    let dir = ctx.out_or(out, "eval");
    report.write_all(&dir)?;
    print!("{}", report.to_text());
    println!("report written to {}", dir.display());
    Ok(())
}

fn predict(ctx: &Context, input: Option<&Path>, calibrate: bool) -> Result<()> {
    let c = &ctx.config;
    let v = ctx.verbalizer()?;
    let mlm = ctx.mlm()?;
    let priors = if calibrate || c.train.calibrate == Some(true) {
        let train = ctx.dataset(c.data.train.as_deref(), "data.train", Split::Train)?;
        let texts = support_texts(&train, c.refinement.support_size, c.train.seeds[0]);
        Some(estimate_priors(mlm.as_ref(), &ctx.template, &texts, &v, c.train.max_sequence_length)?)
    } else {
        None
    };
    let reader: Box<dyn BufRead> = match input {
        Some(p) if p != Path::new("-") => {
            require_exists("--input", p)?;
            Box::new(io::BufReader::new(fs::File::open(p).map_err(|e| data_io(p, e))?))
        }
        _ => Box::new(io::stdin().lock()),
    };
    let mut stdout = io::stdout().lock();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::InvalidData(format!("input line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = CitationInstance::new(format!("line-{}", i + 1), &line, None)?;
        let out = classify(&inst, &ctx.template, &v, mlm.as_ref(), priors.as_ref(), c.train.max_sequence_length)?;
        let scores: serde_json::Map<String, serde_json::Value> = out
            .scores
            .iter()
            .map(|(l, s)| (l.to_string(), serde_json::json!(s)))
            .collect();
        let obj = serde_json::json!({ "label": out.label, "scores": scores });
        writeln!(stdout, "{obj}").map_err(|e| Error::InvalidData(format!("stdout: {e}")))?;
    }
    Ok(())
}

fn report(ctx: &Context, input: Option<&Path>, out: &Option<PathBuf>) -> Result<()> {
    let default = ctx.config.output_dir.join("eval").join("report.json");
    let path = input.unwrap_or(&default);
    require_exists("--input", path)?;
    let r = EvalReport::load(path)?;
    print!("{}", r.to_text());
    if let Some(dir) = out {
        r.write_all(dir)?;
    }
    Ok(())
}
