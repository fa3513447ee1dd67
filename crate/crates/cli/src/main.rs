use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use cqnn::bench::{
    build_dataset, evaluate, label_windows, measure, write_labels, Dataset, EvalOptions, EvalReport, ReportFormat,
    Split, SplitSizes,
};
use cqnn::events::{
    condense, discretize, generate_synthetic, read_events, read_sensor_csv, write_events, DiscretizerConfig, Minute,
    StreamSpec, TimedEvent,
};
use cqnn::exec::Execution;
use cqnn::knowledge::KnowledgeBase;
use cqnn::neuro::WeightBundle;
use cqnn::oracle::{builtin, builtin_sectors, CompiledQuery, BUILTIN_IDS};
use cqnn::windows::{windows, Window, WindowSpec};

/// Continuous queries over city sensor streams, answered by an exact
/// evaluator and by small neural networks.
#[derive(Parser, Debug)]
#[command(name = "cqnn", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// City topology: 10 or 15 sectors.
    #[arg(long, global = true, default_value_t = 10, value_parser = parse_sectors)]
    sectors: usize,
    /// Background knowledge file; the built-in city for `--sectors` otherwise.
    #[arg(long, global = true)]
    kb: Option<PathBuf>,
    /// Comma-separated query ids; defaults to the built-ins of the topology.
    #[arg(long, global = true, value_delimiter = ',')]
    queries: Vec<u8>,
    /// Run the window fan-out on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic event stream.
    Gen {
        /// Stream length in minutes.
        #[arg(long, default_value_t = 17_536)]
        minutes: Minute,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Turn a sensor CSV into discrete events.
    Discretize {
        input: PathBuf,
        /// Readings used to calibrate the bands; all of them when omitted.
        #[arg(long)]
        calibrate: Option<usize>,
        /// Merge this many consecutive minutes into one.
        #[arg(long)]
        condense: Option<Minute>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Label every canonical window of an event stream with the oracle.
    Label {
        events: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Build the encoded, labeled train/test dataset.
    Dataset {
        /// Event stream; a synthetic one is generated from `--seed` if omitted.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long, default_value_t = SplitSizes::default().train)]
        train: usize,
        #[arg(long, default_value_t = SplitSizes::default().test)]
        test: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Answer every test window of a dataset with a bundle.
    Infer {
        bundle: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Score bundles against the oracle labels of a dataset.
    Eval {
        /// Bundle files or directories of `*.json` bundles.
        #[arg(required = true)]
        bundles: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Trainer summary (`query,model,train_accuracy,...`) to merge in.
        #[arg(long)]
        training: Option<PathBuf>,
        #[command(flatten)]
        timing: Timing,
        #[arg(long, default_value = "table")]
        format: String,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Measure single-window latency of bundles and check the budgets.
    Bench {
        #[arg(required = true)]
        bundles: Vec<PathBuf>,
        /// Synthetic windows to cycle through.
        #[arg(long, default_value_t = 500)]
        windows: usize,
        #[command(flatten)]
        timing: Timing,
        #[arg(long, default_value_t = 1000.0)]
        max_median_us: f64,
        #[arg(long, default_value_t = 5000.0)]
        max_p99_us: f64,
    },
    /// Re-render a saved JSON report.
    Report {
        input: PathBuf,
        #[arg(long, default_value = "table")]
        format: String,
        #[arg(long)]
        training: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Copy)]
struct Timing {
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = 1000)]
    passes: usize,
}

fn parse_sectors(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n @ (10 | 15)) => Ok(n),
        _ => Err(format!("expected 10 or 15, got `{s}`")),
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

impl Global {
    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    fn knowledge(&self) -> Result<KnowledgeBase> {
        let kb = match &self.kb {
            Some(p) => KnowledgeBase::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => KnowledgeBase::default_for(self.sectors)?,
        };
        if kb.num_sectors() != self.sectors {
            bail!("knowledge base has {} sectors but --sectors is {}", kb.num_sectors(), self.sectors);
        }
        Ok(kb)
    }

    fn query_ids(&self) -> Result<Vec<u8>> {
        if !self.queries.is_empty() {
            return Ok(self.queries.clone());
        }
        let mut ids = Vec::new();
        for id in BUILTIN_IDS {
            if builtin_sectors(id)? == self.sectors {
                ids.push(id);
            }
        }
        Ok(ids)
    }

    fn compile<'kb>(&self, kb: &'kb KnowledgeBase) -> Result<Vec<(u8, CompiledQuery<'kb>)>> {
        self.query_ids()?
            .into_iter()
            .map(|id| {
                let q = CompiledQuery::new(&builtin(id)?, kb).with_context(|| format!("compiling query {id}"))?;
                Ok((id, q))
            })
            .collect()
    }

    fn synthetic(&self, minutes: Minute) -> Result<Vec<TimedEvent>> {
        Ok(generate_synthetic(&StreamSpec::with_sectors(self.sectors, minutes), self.seed)?)
    }
}

fn bundle_paths(args: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in args {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<io::Result<_>>()?;
            found.retain(|f| f.extension().is_some_and(|e| e == "json"));
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_bundle(path: &Path) -> Result<WeightBundle> {
    WeightBundle::load(path).with_context(|| format!("loading bundle {}", path.display()))
}

fn model_name(path: &Path, bundle: &WeightBundle) -> String {
    let arch = bundle.meta().architecture.to_string();
    match path.file_stem().and_then(|s| s.to_str()) {
        Some(stem) if !stem.ends_with(&arch) => format!("{arch}:{stem}"),
        _ => arch,
    }
}

fn report_format(s: &str) -> Result<ReportFormat> {
    Ok(s.parse::<ReportFormat>()?)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Gen { minutes, out } => {
            let events = g.synthetic(*minutes)?;
            info!("generated {} events over {minutes} minutes", events.len());
            let mut w = output(out)?;
            write_events(&mut w, &events)?;
            w.flush()?;
        }
        Command::Discretize {
            input,
            calibrate,
            condense: factor,
            out,
        } => {
            let mut readings = read_sensor_csv(open(input)?)?;
            if let Some(f) = factor {
                readings = condense(&readings, *f)?;
            }
            let prefix = &readings[..calibrate.unwrap_or(readings.len()).min(readings.len())];
            let cfg = DiscretizerConfig::calibrate(prefix)?;
            let events = discretize(&readings, &cfg)?;
            for e in &events {
                if e.sector.index() >= g.sectors {
                    bail!("reading in sector {} but --sectors is {}", e.sector, g.sectors);
                }
            }
            let mut w = output(out)?;
            write_events(&mut w, &events)?;
            w.flush()?;
        }
        Command::Label { events, out } => {
            let kb = g.knowledge()?;
            let queries = g.compile(&kb)?;
            let stream = read_events(open(events)?)?;
            let ws = windows(&stream, &WindowSpec::canonical())?;
            let labels = label_windows(&ws, &queries, g.exec())?;
            let mut w = output(out)?;
            write_labels(&mut w, &labels)?;
            w.flush()?;
        }
        Command::Dataset {
            events,
            train,
            test,
            out,
        } => {
            let kb = g.knowledge()?;
            let queries = g.compile(&kb)?;
            let sizes = SplitSizes {
                train: *train,
                test: *test,
            };
            let stream = match events {
                Some(p) => read_events(open(p)?)?,
                None => g.synthetic((sizes.total() as Minute).saturating_add(4))?,
            };
            let ds = build_dataset(&stream, &WindowSpec::canonical(), &queries, g.sectors, sizes, g.exec())?;
            for (col, id) in ds.queries.iter().enumerate() {
                let positive = ds.records.iter().filter(|r| r.answers[col].bits().iter().any(|&b| b)).count();
                info!("q{id}: {positive}/{} windows with a set bit", ds.records.len());
            }
            let mut w = output(out)?;
            ds.write(&mut w)?;
            w.flush()?;
        }
        Command::Infer { bundle, dataset, out } => {
            let b = load_bundle(bundle)?;
            let ds = Dataset::read(open(dataset)?)?;
            if ds.sectors != b.meta().sectors {
                bail!("bundle expects {} sectors, dataset has {}", b.meta().sectors, ds.sectors);
            }
            let test: Vec<_> = ds.split(Split::Test).collect();
            let answers = g.exec().try_map(&test, |r| b.predict(&r.window()))?;
            let mut w = output(out)?;
            writeln!(w, "window_end,q{}", b.meta().query)?;
            for (r, a) in test.iter().zip(&answers) {
                writeln!(w, "{},{a}", r.window_end)?;
            }
            w.flush()?;
        }
        Command::Eval {
            bundles,
            dataset,
            training,
            timing,
            format,
            out,
        } => {
            let format = report_format(format)?;
            let ds = Dataset::read(open(dataset)?)?;
            if ds.sectors != g.sectors {
                bail!("dataset has {} sectors but --sectors is {}", ds.sectors, g.sectors);
            }
            let kb = g.knowledge()?;
            let opts = EvalOptions {
                warmup: timing.warmup,
                passes: timing.passes,
                exec: g.exec(),
            };
            let mut report = EvalReport::default();
            for path in bundle_paths(bundles)? {
                let b = load_bundle(&path)?;
                let id = b.meta().query;
                if b.meta().sectors != ds.sectors || !ds.queries.contains(&id) {
                    info!("skipping {}: dataset has no q{id} labels for {} sectors", path.display(), b.meta().sectors);
                    continue;
                }
                let oracle = CompiledQuery::new(&builtin(id)?, &kb)?;
                let row = evaluate(&b, &model_name(&path, &b), id, &oracle, &ds, &opts)
                    .with_context(|| format!("evaluating {}", path.display()))?;
                info!("q{id} {}: test accuracy {:.4}", row.model, row.test_accuracy);
                report.rows.push(row);
            }
            if report.rows.is_empty() {
                bail!("no bundle matched the dataset");
            }
            if let Some(t) = training {
                report.merge_training(&fs::read_to_string(t)?)?;
            }
            let mut w = output(out)?;
            w.write_all(report.render(format).as_bytes())?;
            w.flush()?;
        }
        Command::Bench {
            bundles,
            windows: count,
            timing,
            max_median_us,
            max_p99_us,
        } => {
            let mut failures = 0;
            println!("bundle  median_us  p99_us  verdict");
            for path in bundle_paths(bundles)? {
                let b = load_bundle(&path)?;
                let sectors = b.meta().sectors;
                let stream = generate_synthetic(
                    &StreamSpec::with_sectors(sectors, *count as Minute + 4),
                    g.seed,
                )?;
                let ws: Vec<Window> = windows(&stream, &WindowSpec::canonical())?;
                let lat = measure(&ws, timing.warmup, timing.passes, |w| b.predict(w))?;
                let ok = lat.median_us <= *max_median_us && lat.p99_us <= *max_p99_us;
                failures += usize::from(!ok);
                println!(
                    "{}  {:.1}  {:.1}  {}",
                    path.display(),
                    lat.median_us,
                    lat.p99_us,
                    if ok { "ok" } else { "over budget" }
                );
            }
            if failures > 0 {
                bail!("{failures} bundle(s) over the latency budget");
            }
        }
        Command::Report {
            input,
            format,
            training,
            out,
        } => {
            let format = report_format(format)?;
            let mut report = EvalReport::parse(&fs::read_to_string(input)?, ReportFormat::Json)?;
            if let Some(t) = training {
                report.merge_training(&fs::read_to_string(t)?)?;
            }
            let mut w = output(out)?;
            w.write_all(report.render(format).as_bytes())?;
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
