//! `transtrust`: run scenarios, verify transcripts, print variant matrices.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use transtrust::config::{ConfigError, ScenarioConfig};
use transtrust::fabric::Transcript;
use transtrust::report::{self, RunReport, Suite};
use transtrust::scenarios;

const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "transtrust", version, about = "Deterministic simulation of TPM-backed transitive trust")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario in a config file; writes a transcript and a report.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory [env: TRANSTRUST_OUT, default: out]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a transcript against an invariant suite.
    Verify {
        transcript: PathBuf,
        /// ordering, layering, tamper, clone, conservation, containment or scenario
        #[arg(long, default_value = "scenario")]
        suite: Suite,
    },
    /// Run every variant combination of the config's scenario.
    Matrix {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Summarise a transcript.
    Inspect { transcript: PathBuf },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Adversary rule, e.g. tamper:WrappedTau:0 (repeatable)
    #[arg(long = "adversary", value_name = "RULE")]
    adversary: Vec<String>,
    /// encrypted or mac_only
    #[arg(long)]
    privacy: Option<String>,
    /// Variant of the config's scenario
    #[arg(long)]
    variant: Option<String>,
    /// Any config key, e.g. prepaid.purchases=[1,2] (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn load(&self, path: &Path) -> Result<ScenarioConfig, ConfigError> {
        let cfg = ScenarioConfig::load(path, &self.set)?;
        let mut extra = Vec::new();
        if let Some(s) = self.seed {
            extra.push(format!("run.seed={s}"));
        }
        if let Some(p) = &self.privacy {
            extra.push(format!("pos.privacy={p}"));
        }
        if let Some(v) = &self.variant {
            extra.push(format!("{}={v}", cfg.scenario().variant_key()));
        }
        let mut cfg = if extra.is_empty() { cfg } else { cfg.with_overrides(&extra)? };
        cfg.adversary.script.extend(self.adversary.iter().cloned());
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fail(code: u8, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(code)
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("TRANSTRUST_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run(config: &Path, overrides: &Overrides, out: Option<PathBuf>) -> ExitCode {
    let cfg = match overrides.load(config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let result = match scenarios::run(&cfg) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let dir = out_dir(out);
    let stem = config
        .file_stem()
        .map_or("run".into(), |s| s.to_string_lossy().into_owned());
    let transcript_path = dir.join(format!("{stem}.transcript"));
    let report_path = dir.join(format!("{stem}.report"));
    let report = RunReport::new(&result, &transcript_path.display().to_string());
    let text = report.render();
    let written = fs::create_dir_all(&dir)
        .and_then(|_| fs::write(&transcript_path, result.world.fabric.transcript().render()))
        .and_then(|_| fs::write(&report_path, &text));
    if let Err(e) = written {
        return fail(EXIT_CONFIG, format!("{}: {e}", dir.display()));
    }
    print!("{text}");
    ExitCode::from(report.exit_code() as u8)
}

fn read_transcript(path: &Path) -> Result<Transcript, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Transcript::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn verify(path: &Path, suite: Suite) -> ExitCode {
    let t = match read_transcript(path) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let results = match report::verify(&t, suite) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    println!("suite = {suite}");
    for r in &results {
        println!("{r}");
    }
    if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn matrix(config: &Path, overrides: &Overrides) -> ExitCode {
    let cfg = match overrides.load(config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    match report::matrix(&cfg) {
        Ok(m) => {
            print!("{}", m.render());
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

fn inspect(path: &Path) -> ExitCode {
    let t = match read_transcript(path) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    println!("seed = {}", t.seed);
    for (k, v) in &t.header {
        println!("{k} = {v}");
    }
    println!("envelopes = {}", t.entries.len());
    let mut by_kind: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for e in &t.entries {
        let slot = match e.status.as_str() {
            "accepted" => 0,
            "rejected" => 1,
            _ => 2,
        };
        by_kind.entry(e.kind.to_string()).or_default()[slot] += 1;
    }
    for (kind, [a, r, d]) in &by_kind {
        println!("kind.{kind} = accepted:{a} rejected:{r} dropped:{d}");
    }
    for a in &t.adversary {
        println!("adversary = seq {} {}", a.seq, a.action);
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, overrides, out } => run(&config, &overrides, out),
        Command::Verify { transcript, suite } => verify(&transcript, suite),
        Command::Matrix { config, overrides } => matrix(&config, &overrides),
        Command::Inspect { transcript } => inspect(&transcript),
    }
}
