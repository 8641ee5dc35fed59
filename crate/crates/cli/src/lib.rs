//! Subcommands of the `phredgan` binary. [`run`] returns the process exit
//! code: 0 on success, 1 for usage errors, 2 for runtime failures.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use phredgan::autodiff::ParamStore;
use phredgan::chat::ChatSession;
use phredgan::checkpoint::{header_for, Checkpoint};
use phredgan::config::{RunConfig, KEYS};
use phredgan::data::{
    build_vocabularies, encode_all, generate_synthetic, load_corpus, write_synthetic, AttributeVocab, Dialogue,
    SynthSpec, Vocab,
};
use phredgan::inference::{
    candidate_records, contexts, default_alpha_grid, generate_ranked, search_noise_variance, Context,
};
use phredgan::metrics::{teacher_forced_nll, MetricsReport};
use phredgan::model::PhredModel;
use phredgan::training::{train, Progress, StepReport, TrainConfig, TrainObserver};
use phredgan::{seed, Error};

pub const CONFIG_ENV: &str = "PHREDGAN_CONFIG";

/// Usage problems found after argument parsing.
#[derive(Debug)]
struct Usage(String);

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Prefixes runtime errors with the file they concern.
fn at(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u.0)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn with_run_config(cmd: Command) -> Command {
    let defaults = RunConfig::default();
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .env(CONFIG_ENV)
            .value_name("PATH")
            .value_parser(value_parser!(PathBuf))
            .help("key = value config file; flags override it"),
    );
    KEYS.iter().fold(cmd, |cmd, key| {
        cmd.arg(
            Arg::new(key.name)
                .long(flag(key.name))
                .value_name("VALUE")
                .default_value(defaults.get(key.name).expect("listed key"))
                .help(key.help),
        )
    })
}

fn format_arg() -> Arg {
    Arg::new("format")
        .long("format")
        .value_parser(["table", "json"])
        .default_value("table")
        .help("report format")
}

fn output_arg() -> Arg {
    Arg::new("output")
        .long("output")
        .short('o')
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help("write to a file instead of stdout")
}

pub fn command() -> Command {
    let synth = Command::new("synth")
        .about("Write a synthetic persona corpus ({stem}.train/.dev/.test and {stem}.styles.json)")
        .arg(
            Arg::new("personas")
                .long("personas")
                .value_parser(value_parser!(u64).range(1..=phredgan::data::MAX_PERSONAS as u64))
                .default_value("2")
                .help("number of personas"),
        )
        .arg(Arg::new("vocab_size").long("vocab-size").value_parser(value_parser!(usize)).default_value("40").help("distinct corpus words"))
        .arg(Arg::new("dialogues").long("dialogues").value_parser(value_parser!(usize)).default_value("200").help("dialogue count"))
        .arg(Arg::new("turns").long("turns").value_parser(value_parser!(usize)).default_value("3").help("turns per dialogue"))
        .arg(Arg::new("seed").long("seed").value_parser(value_parser!(u64)).default_value("7").help("generator seed"))
        .arg(Arg::new("out_dir").long("out-dir").value_parser(value_parser!(PathBuf)).default_value("data").help("output directory, created if missing"))
        .arg(Arg::new("stem").long("stem").default_value("synth").help("file name stem"));

    let train = with_run_config(Command::new("train").about("Train phredGAN; checkpoints after every epoch"))
        .arg(Arg::new("resume").long("resume").action(ArgAction::SetTrue).help("continue from the checkpoint"))
        .arg(
            Arg::new("max_steps")
                .long("max-steps")
                .value_parser(value_parser!(u64))
                .help("stop (and checkpoint) once this many steps have run in total"),
        )
        .arg(
            Arg::new("log")
                .long("log")
                .value_parser(value_parser!(PathBuf))
                .help("step log [default: checkpoint path with .log]"),
        );

    let noise = with_run_config(Command::new("noise-search").about("Linear search for the inference noise variance on the dev set"))
        .arg(Arg::new("grid").long("grid").default_value("1..30").help("`lo..hi` in steps of 1, or a comma list"))
        .arg(format_arg())
        .arg(output_arg());

    let eval = with_run_config(Command::new("eval").about("Perplexity, BLEU-4, ROUGE-2, distinct-1/2 on the test set"))
        .arg(format_arg())
        .arg(output_arg());

    let generate = with_run_config(Command::new("generate").about("Ranked candidates per test context as JSONL"))
        .arg(output_arg())
        .arg(Arg::new("limit").long("limit").value_parser(value_parser!(usize)).help("only the first N contexts"));

    let chat = with_run_config(Command::new("chat").about("Interactive chat; /help lists the commands"))
        .arg(Arg::new("persona").long("persona").help("initial responder attribute"));

    Command::new("phredgan")
        .about("Persona-conditioned adversarial dialogue model")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands([synth, train, noise, eval, generate, chat])
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = match name {
        "synth" => cmd_synth(sub, stdout),
        "train" => cmd_train(sub, stdout),
        "noise-search" => cmd_noise_search(sub, stdout),
        "eval" => cmd_eval(sub, stdout),
        "generate" => cmd_generate(sub, stdout),
        "chat" => cmd_chat(sub, stdin, stdout),
        _ => unreachable!("unknown subcommand {name}"),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            2
        }
    }
}

/// Defaults, then the config file, then flags given on the command line.
pub fn resolve_config(m: &ArgMatches) -> std::result::Result<RunConfig, String> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(path) => RunConfig::load(path).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    for key in KEYS {
        if m.value_source(key.name) == Some(ValueSource::CommandLine) {
            let value = m.get_one::<String>(key.name).expect("has a value");
            cfg.set(key.name, value).map_err(|e| format!("--{}: {e}", flag(key.name)))?;
        }
    }
    Ok(cfg)
}

fn config(m: &ArgMatches) -> std::result::Result<RunConfig, Usage> {
    resolve_config(m).map_err(Usage)
}

fn cmd_synth(m: &ArgMatches, out: &mut dyn Write) -> CmdResult {
    let spec = SynthSpec {
        personas: *m.get_one::<u64>("personas").unwrap() as usize,
        vocab_size: *m.get_one("vocab_size").unwrap(),
        dialogues: *m.get_one("dialogues").unwrap(),
        turns: *m.get_one("turns").unwrap(),
        seed: *m.get_one("seed").unwrap(),
    };
    spec.validate().map_err(|e| Usage(e.to_string()))?;
    let corpus = generate_synthetic(&spec)?;
    let dir: &PathBuf = m.get_one("out_dir").unwrap();
    let files = write_synthetic(&corpus, dir, m.get_one::<String>("stem").unwrap())?;
    for path in [&files.train, &files.dev, &files.test, &files.styles] {
        writeln!(out, "{}", path.display())?;
    }
    Ok(())
}

fn read_dialogues(path: &str, vocab: &Vocab, attributes: &AttributeVocab) -> std::result::Result<Vec<Dialogue>, Failure> {
    let loaded = load_corpus(Path::new(path)).map_err(at(Path::new(path)))?;
    if loaded.dropped > 0 {
        log::warn!("{path}: dropped {} dialogue(s) with fewer than two turns", loaded.dropped);
    }
    encode_all(&loaded.dialogues, vocab, attributes).map_err(at(Path::new(path)))
}

struct CliObserver<'a> {
    log: BufWriter<File>,
    path: &'a Path,
    model: &'a PhredModel,
    train: &'a TrainConfig,
    vocab: &'a Vocab,
    attributes: &'a AttributeVocab,
    max_steps: Option<u64>,
    stop: bool,
    epoch_mle: (f64, usize),
}

impl CliObserver<'_> {
    fn save(&self, store: &ParamStore, next: Progress) -> phredgan::Result<()> {
        Checkpoint {
            header: header_for(self.model, self.train, next, self.vocab, self.attributes),
            model: self.model.clone(),
            store: store.clone(),
            vocab: self.vocab.clone(),
            attributes: self.attributes.clone(),
        }
        .save(self.path)
    }
}

impl TrainObserver for CliObserver<'_> {
    fn after_step(&mut self, report: &StepReport, store: &ParamStore, next: Progress) -> phredgan::Result<()> {
        writeln!(self.log, "{}", report.log_line())?;
        self.epoch_mle.0 += report.mle;
        self.epoch_mle.1 += 1;
        if self.max_steps.is_some_and(|n| next.step >= n) {
            self.log.flush()?;
            self.save(store, next)?;
            log::info!("stopped after step {}; checkpoint at epoch {} batch {}", next.step, next.epoch, next.batch);
            self.stop = true;
        }
        Ok(())
    }

    fn after_epoch(&mut self, epoch: u64, store: &ParamStore, next: Progress) -> phredgan::Result<()> {
        self.log.flush()?;
        self.save(store, next)?;
        let (sum, n) = std::mem::take(&mut self.epoch_mle);
        log::info!("epoch {} done: mean step mle {:.4}", epoch + 1, sum / n.max(1) as f64);
        Ok(())
    }

    fn should_stop(&self) -> bool {
        self.stop
    }
}

fn cmd_train(m: &ArgMatches, out: &mut dyn Write) -> CmdResult {
    let cfg = config(m)?;
    let train_cfg = cfg.train_config();
    train_cfg.validate().map_err(|e| Usage(e.to_string()))?;
    let ckpt = PathBuf::from(&cfg.checkpoint);
    let log_path = m.get_one::<PathBuf>("log").cloned().unwrap_or_else(|| ckpt.with_extension("log"));

    let (model, mut store, vocab, attributes, from) = if m.get_flag("resume") {
        let ck = Checkpoint::load(&ckpt).map_err(at(&ckpt))?;
        if ck.header.model != cfg.model_config(ck.vocab.len(), ck.attributes.len()) {
            log::warn!("model settings differ from the checkpoint; using the checkpoint's");
        }
        if (TrainConfig { epochs: ck.header.train.epochs, ..train_cfg.clone() }) != ck.header.train {
            log::warn!("training settings other than epochs differ from the checkpoint; the resumed run will diverge");
        }
        let p = ck.header.progress;
        log::info!("resuming at epoch {} batch {} (step {})", p.epoch, p.batch, p.step);
        (ck.model, ck.store, ck.vocab, ck.attributes, p)
    } else {
        let raw = load_corpus(Path::new(&cfg.train_file)).map_err(at(Path::new(&cfg.train_file)))?;
        let (vocab, attributes) = build_vocabularies(&raw.dialogues, cfg.max_vocab)?;
        let model_cfg = cfg.model_config(vocab.len(), attributes.len());
        model_cfg.validate().map_err(|e| Usage(e.to_string()))?;
        let mut store = ParamStore::new();
        let model = PhredModel::new(model_cfg, &mut store, &mut seed::rng(&[cfg.seed, 0x1417]))?;
        (model, store, vocab, attributes, Progress::start())
    };
    let corpus = read_dialogues(&cfg.train_file, &vocab, &attributes)?;

    let resume_log = m.get_flag("resume") && log_path.exists();
    if let Some(parent) = log_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut log = BufWriter::new(if resume_log {
        truncate_log(&log_path, from.step)?;
        OpenOptions::new().append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    });
    if !resume_log {
        writeln!(log, "{}", StepReport::HEADER)?;
    }
    let mut obs = CliObserver {
        log,
        path: &ckpt,
        model: &model,
        train: &train_cfg,
        vocab: &vocab,
        attributes: &attributes,
        max_steps: m.get_one::<u64>("max_steps").copied(),
        stop: false,
        epoch_mle: (0.0, 0),
    };
    if obs.max_steps.is_some_and(|n| n <= from.step) {
        writeln!(out, "nothing to do: checkpoint is already at step {}", from.step)?;
        return Ok(());
    }
    let end = train(&model, &mut store, &corpus, &train_cfg, from, &mut obs)?;
    obs.log.flush()?;
    if end == from {
        obs.save(&store, end)?;
    }
    cfg.save(&ckpt.with_extension("cfg"))?;
    writeln!(out, "checkpoint {} at epoch {} step {}", ckpt.display(), end.epoch, end.step)?;
    writeln!(out, "log {}", log_path.display())?;
    Ok(())
}

/// Keeps the header and the first `steps` report lines, dropping lines
/// written after the checkpoint being resumed.
fn truncate_log(path: &Path, steps: u64) -> io::Result<()> {
    let text = fs::read_to_string(path)?;
    let kept: Vec<&str> = text.lines().take(1 + steps as usize).collect();
    fs::write(path, kept.join("\n") + "\n")
}

struct Loaded {
    cfg: RunConfig,
    ck: Checkpoint,
}

fn load(m: &ArgMatches) -> std::result::Result<Loaded, Failure> {
    let cfg = config(m)?;
    cfg.inference_config().validate().map_err(|e| Usage(e.to_string()))?;
    let ck = Checkpoint::load(Path::new(&cfg.checkpoint)).map_err(at(Path::new(&cfg.checkpoint)))?;
    Ok(Loaded { cfg, ck })
}

fn contexts_of(path: &str, ck: &Checkpoint) -> std::result::Result<Vec<Context>, Failure> {
    let dialogues = read_dialogues(path, &ck.vocab, &ck.attributes)?;
    Ok(contexts(&dialogues))
}

fn parse_grid(text: &str) -> std::result::Result<Vec<f64>, Usage> {
    let bad = || Usage(format!("bad grid {text:?}; use lo..hi or a comma list"));
    if text == "1..30" {
        return Ok(default_alpha_grid());
    }
    let grid: Vec<f64> = if let Some((lo, hi)) = text.split_once("..") {
        let (lo, hi): (u32, u32) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
        (lo..=hi).map(f64::from).collect()
    } else {
        text.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if grid.is_empty() || grid.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(bad());
    }
    Ok(grid)
}

fn sink<'a>(m: &ArgMatches, stdout: &'a mut dyn Write) -> io::Result<Box<dyn Write + 'a>> {
    Ok(match m.get_one::<PathBuf>("output") {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            Box::new(BufWriter::new(File::create(path)?))
        }
        None => Box::new(stdout),
    })
}

fn cmd_noise_search(m: &ArgMatches, stdout: &mut dyn Write) -> CmdResult {
    let grid = parse_grid(m.get_one::<String>("grid").unwrap())?;
    let Loaded { cfg, ck } = load(m)?;
    let dev = contexts_of(&cfg.dev_file, &ck)?;
    let result = search_noise_variance(&ck.model, &ck.store, &dev, &grid, cfg.max_len, cfg.seed)?;
    let mut out = sink(m, stdout)?;
    if m.get_one::<String>("format").unwrap() == "json" {
        writeln!(out, "{}", serde_json::to_string_pretty(&result).map_err(Error::from)?)?;
    } else {
        writeln!(out, "{:>6}  {:>12}", "alpha", "-log D(G)")?;
        for (a, l) in &result.losses {
            writeln!(out, "{a:>6}  {l:>12.6}")?;
        }
        writeln!(out, "best alpha {} (loss {:.6}) over {} dev contexts", result.best_alpha, result.best_loss, dev.len())?;
        if result.ties.is_empty() {
            writeln!(out, "ties: none")?;
        } else {
            let ties: Vec<String> = result.ties.iter().map(|a| a.to_string()).collect();
            writeln!(out, "ties: {} (broken toward the smallest alpha)", ties.join(", "))?;
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_eval(m: &ArgMatches, stdout: &mut dyn Write) -> CmdResult {
    let Loaded { cfg, ck } = load(m)?;
    let dialogues = read_dialogues(&cfg.test_file, &ck.vocab, &ck.attributes)?;
    let ctxs = contexts(&dialogues);
    if ctxs.is_empty() {
        return Err(Error::Empty("test set").into());
    }
    let noise = ck.model.config().noise.with_alpha(cfg.alpha);
    let (nll, words) = teacher_forced_nll(&ck.model, &ck.store, &dialogues, &noise, cfg.seed)?;
    let inf = cfg.inference_config();
    let mut hyps = Vec::with_capacity(ctxs.len());
    for c in &ctxs {
        let ranked = generate_ranked(&ck.model, &ck.store, &c.turns, c.responder, &inf, c.id as u64)?;
        hyps.push(ranked[0].tokens.clone());
    }
    let refs: Vec<Vec<u32>> = ctxs.iter().map(|c| c.reference.clone()).collect();
    let report = MetricsReport::from_text((nll / words as f64).exp(), words, &hyps, &refs)?;
    let mut out = sink(m, stdout)?;
    if m.get_one::<String>("format").unwrap() == "json" {
        writeln!(out, "{}", serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    } else {
        write!(out, "{}", report.table())?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_generate(m: &ArgMatches, stdout: &mut dyn Write) -> CmdResult {
    let Loaded { cfg, ck } = load(m)?;
    let mut ctxs = contexts_of(&cfg.test_file, &ck)?;
    if let Some(&n) = m.get_one::<usize>("limit") {
        ctxs.truncate(n);
    }
    let inf = cfg.inference_config();
    let mut out = sink(m, stdout)?;
    for c in &ctxs {
        let ranked = generate_ranked(&ck.model, &ck.store, &c.turns, c.responder, &inf, c.id as u64)?;
        for record in candidate_records(c.id, &ranked, &ck.vocab) {
            writeln!(out, "{}", serde_json::to_string(&record).map_err(Error::from)?)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_chat(m: &ArgMatches, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> CmdResult {
    let Loaded { cfg, ck } = load(m)?;
    let mut session = ChatSession::new(&ck.model, &ck.store, &ck.vocab, &ck.attributes, cfg.inference_config())?;
    if let Some(p) = m.get_one::<String>("persona") {
        let mut sink = Vec::new();
        ck.attributes.id(p).map_err(|e| Usage(e.to_string()))?;
        session.handle(&format!("/persona {p}"), &mut sink)?;
    }
    session.run(stdin, stdout)?;
    Ok(())
}
