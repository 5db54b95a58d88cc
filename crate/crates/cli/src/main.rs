use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use roa_cli::artifact::{
    read_artifact, write_json, ControllerArtifact, InnerArtifact, OuterArtifact, CONTROLLER_FILE, FAILED_FILE, INNER_FILE, OUTER_FILE, REPORT_FILE,
    SUMMARY_FILE,
};
use roa_cli::pipeline::{extract_stage, grid_stage, inner_stage, outer_stage, verify_stage, PipelineError, VerificationReport};
use roa_cli::problem::{Overrides, Problem};
use serde::Serialize;

/// Inner and outer region-of-attraction approximations of polynomial control
/// systems.
#[derive(Parser)]
#[command(name = "roa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run outer, extract, inner, verify and grid in sequence.
    Run(Common),
    /// Solve the outer relaxation.
    Outer(Common),
    /// Extract a polynomial controller from the outer certificate.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Skip the projection onto certified input bounds.
        #[arg(long)]
        raw_only: bool,
    },
    /// Solve the inner relaxation for the extracted controller.
    Inner(Common),
    /// Re-check stored certificates without solving anything.
    Verify(Common),
    /// Write level-set grids of the stored certificates.
    Grid(Common),
}

#[derive(Args)]
struct Common {
    /// Problem file.
    problem: PathBuf,
    /// Artifact directory; defaults to the problem's `output` entry.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Relaxation order of the outer and inner problems.
    #[arg(long)]
    order: Option<usize>,
    /// Comma-separated discount factors of the inner problem.
    #[arg(long, value_delimiter = ',')]
    beta_vec: Option<Vec<f64>>,
    /// Solver tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Seed of the sampled checks and simulations.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<(Problem, PathBuf), ExitCode> {
        let mut p = Problem::read(&self.problem).map_err(|e| {
            eprintln!("error: {}: {e}", self.problem.display());
            ExitCode::from(2)
        })?;
        let o = Overrides {
            order: self.order,
            beta_vec: self.beta_vec.clone(),
            tol: self.tol,
            seed: self.seed,
        };
        p.apply_overrides(&o).map_err(|e| {
            eprintln!("error: {e}");
            ExitCode::from(2)
        })?;
        let dir = self
            .out
            .clone()
            .or_else(|| p.output.clone())
            .unwrap_or_else(|| PathBuf::from("out").join(&p.name));
        std::fs::create_dir_all(&dir).map_err(|e| {
            eprintln!("error: cannot create {}: {e}", dir.display());
            ExitCode::from(2)
        })?;
        Ok((p, dir))
    }
}

#[derive(Serialize)]
struct Timing {
    stage: &'static str,
    seconds: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    problem: &'a str,
    passed: bool,
    outer_volume: f64,
    inner_volume: f64,
    x_volume: f64,
    reach_rate: f64,
    timings: Vec<Timing>,
}

fn fail(dir: &Path, stage: &str, msg: &str) -> ExitCode {
    eprintln!("{stage} failed: {msg}");
    let _ = std::fs::write(dir.join(FAILED_FILE), format!("stage: {stage}\n{msg}\n"));
    ExitCode::from(1)
}

fn write(dir: &Path, name: &str, value: &impl Serialize) -> Result<(), PipelineError> {
    write_json(&dir.join(name), value).map_err(|e| PipelineError::Refused(format!("cannot write {name}: {e}")))
}

fn outer(p: &Problem, dir: &Path) -> Result<OuterArtifact, PipelineError> {
    let (art, _) = outer_stage(p)?;
    write(dir, OUTER_FILE, &art)?;
    Ok(art)
}

fn extract(p: &Problem, dir: &Path, raw_only: bool) -> Result<ControllerArtifact, PipelineError> {
    let o: OuterArtifact = read_artifact(&dir.join(OUTER_FILE))?;
    let art = extract_stage(p, &o, raw_only)?;
    write(dir, CONTROLLER_FILE, &art)?;
    Ok(art)
}

fn inner(p: &Problem, dir: &Path) -> Result<InnerArtifact, PipelineError> {
    let c: ControllerArtifact = read_artifact(&dir.join(CONTROLLER_FILE))?;
    let art = inner_stage(p, &c)?;
    write(dir, INNER_FILE, &art)?;
    Ok(art)
}

fn verify(p: &Problem, dir: &Path) -> Result<VerificationReport, PipelineError> {
    let o: OuterArtifact = read_artifact(&dir.join(OUTER_FILE))?;
    let c: ControllerArtifact = read_artifact(&dir.join(CONTROLLER_FILE))?;
    let i: InnerArtifact = read_artifact(&dir.join(INNER_FILE))?;
    let rep = verify_stage(p, &o, &c, &i)?;
    write(dir, REPORT_FILE, &rep)?;
    Ok(rep)
}

fn grid(p: &Problem, dir: &Path) -> Result<(), PipelineError> {
    let o: OuterArtifact = read_artifact(&dir.join(OUTER_FILE))?;
    let i: InnerArtifact = read_artifact(&dir.join(INNER_FILE))?;
    for f in grid_stage(p, &o, &i)? {
        std::fs::write(dir.join(&f.name), f.csv).map_err(|e| PipelineError::Refused(format!("cannot write {}: {e}", f.name)))?;
    }
    Ok(())
}

fn report_verdict(dir: &Path, rep: &VerificationReport) -> ExitCode {
    if rep.passed {
        println!(
            "verify: all sampled checks passed; inner volume {:.4}, outer volume {:.4}, reach rate {:.3}",
            rep.volumes.inner.volume,
            rep.volumes.outer.volume,
            rep.reach.success_rate()
        );
        ExitCode::SUCCESS
    } else {
        fail(dir, "verify", &format!("failed checks: {}", rep.failed_checks().join("; ")))
    }
}

fn run(p: &Problem, dir: &Path) -> ExitCode {
    let _ = std::fs::remove_file(dir.join(FAILED_FILE));
    let mut timings = Vec::new();
    let mut timed = |stage: &'static str, f: &mut dyn FnMut() -> Result<(), PipelineError>| -> Result<(), ExitCode> {
        let t = Instant::now();
        f().map_err(|e| fail(dir, stage, &e.to_string()))?;
        let seconds = t.elapsed().as_secs_f64();
        println!("{stage}: done in {seconds:.2} s");
        timings.push(Timing { stage, seconds });
        Ok(())
    };
    let mut rep = None;
    let steps: [(&'static str, &mut dyn FnMut() -> Result<(), PipelineError>); 5] = [
        ("outer", &mut || outer(p, dir).map(|_| ())),
        ("extract", &mut || extract(p, dir, false).map(|_| ())),
        ("inner", &mut || inner(p, dir).map(|_| ())),
        ("verify", &mut || verify(p, dir).map(|r| rep = Some(r))),
        ("grid", &mut || grid(p, dir)),
    ];
    for (stage, f) in steps {
        if let Err(code) = timed(stage, f) {
            return code;
        }
    }
    let rep = rep.expect("verify ran");
    let summary = Summary {
        problem: &p.name,
        passed: rep.passed,
        outer_volume: rep.volumes.outer.volume,
        inner_volume: rep.volumes.inner.volume,
        x_volume: rep.volumes.x,
        reach_rate: rep.reach.success_rate(),
        timings,
    };
    if let Err(e) = write(dir, SUMMARY_FILE, &summary) {
        return fail(dir, "summary", &e.to_string());
    }
    report_verdict(dir, &rep)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, stage) = match &cli.command {
        Command::Run(c) => (c, "run"),
        Command::Outer(c) => (c, "outer"),
        Command::Extract { common, .. } => (common, "extract"),
        Command::Inner(c) => (c, "inner"),
        Command::Verify(c) => (c, "verify"),
        Command::Grid(c) => (c, "grid"),
    };
    let (p, dir) = match common.load() {
        Ok(x) => x,
        Err(code) => return code,
    };
    let done = |r: Result<(), PipelineError>| match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&dir, stage, &e.to_string()),
    };
    match &cli.command {
        Command::Run(_) => run(&p, &dir),
        Command::Outer(_) => done(outer(&p, &dir).map(|_| ())),
        Command::Extract { raw_only, .. } => done(extract(&p, &dir, *raw_only).map(|_| ())),
        Command::Inner(_) => done(inner(&p, &dir).map(|_| ())),
        Command::Verify(_) => match verify(&p, &dir) {
            Ok(rep) => report_verdict(&dir, &rep),
            Err(e) => fail(&dir, stage, &e.to_string()),
        },
        Command::Grid(_) => done(grid(&p, &dir)),
    }
}
