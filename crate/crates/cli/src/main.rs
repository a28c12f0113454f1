//! `hmcgeo`: the prediction pipeline as subcommands over one config file.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hmcgeo::config::RunConfig;
use hmcgeo::eval::{evaluate, read_predictions, write_cdf_csv, write_predictions, CentroidTable, PredictionRecord, Truth};
use hmcgeo::hosts::{
    cluster_by_last_hop, generate_synthetic, label_hosts, load_hosts, split_train_test, write_hosts_csv, Dataset,
    HostRecord, Split, SyntheticWorld,
};
use hmcgeo::model::HmcGeo;
use hmcgeo::numerics::Checkpoint;
use hmcgeo::regions::{build_hierarchy, HierarchyTree, RegionSet};
use hmcgeo::training::{
    grid_search, predict_hosts, sweep, toy_gradient_check, train, unit_grid, write_history_csv, SweepParam,
};
use hmcgeo::{Error, Result};

#[derive(Parser)]
#[command(name = "hmcgeo", version, about = "Hierarchical multi-label IP region prediction")]
struct Cli {
    /// Run configuration (TOML, or JSON when the extension is .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Alpha,
    Beta,
}

#[derive(Subcommand)]
enum Command {
    /// Label hosts with their region at every granularity.
    MapRegions,
    /// Derive the region tree from the polygon files.
    BuildHierarchy,
    /// Partition hosts by last-hop router and assign the train/test split.
    ClusterHosts,
    /// Write a synthetic dataset.
    Synth,
    /// Fit the model; writes the checkpoint and per-epoch history.
    Train {
        /// Pick hyperparameters on a held-out split before the final fit.
        #[arg(long)]
        grid: bool,
        /// Also write a validation-accuracy table over the 21-point grid.
        #[arg(long, value_enum)]
        sweep: Vec<SweepArg>,
    },
    /// Predict the regions of every non-training host.
    Predict {
        /// Defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a prediction file against the host labels.
    Evaluate {
        /// Defaults to `<out>/predictions.jsonl`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// DBSCAN study of landmark coordinates per last-hop cluster.
    Analyze,
    /// Finite-difference check of the model gradients on a toy problem.
    GradCheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = match &cli.config {
        Some(p) => {
            require(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    }
    .with_seed(cli.seed)
    .with_out(cli.out.clone());
    let out = cfg.paths.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
    let ctx = Ctx { cfg, out };
    match cli.command {
        Command::Synth => ctx.synth(),
        Command::MapRegions => ctx.map_regions(),
        Command::BuildHierarchy => ctx.build_hierarchy(),
        Command::ClusterHosts => ctx.cluster_hosts(),
        Command::Train { grid, sweep } => ctx.train(grid, &sweep),
        Command::Predict { checkpoint } => ctx.predict(checkpoint),
        Command::Evaluate { predictions } => ctx.evaluate(predictions),
        Command::Analyze => ctx.analyze(),
        Command::GradCheck => return ctx.grad_check(),
    }?;
    Ok(0)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", path.display())))
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

/// Regions, tree and hosts with labels and a train/test split.
struct Prepared {
    sets: Vec<RegionSet>,
    tree: HierarchyTree,
    dataset: Dataset,
}

impl Ctx {
    /// Configured region files, or the synthetic layout inside the output
    /// directory when none are configured.
    fn region_paths(&self) -> Result<Vec<PathBuf>> {
        if !self.cfg.paths.regions.is_empty() {
            for p in &self.cfg.paths.regions {
                require(p)?;
            }
            return Ok(self.cfg.paths.regions.clone());
        }
        let found: Vec<PathBuf> = (0..)
            .map(|g| self.out.join(SyntheticWorld::region_file_name(g)))
            .take_while(|p| p.exists())
            .collect();
        if found.is_empty() {
            return Err(Error::Config(format!(
                "no region files configured and none found in {}",
                self.out.display()
            )));
        }
        Ok(found)
    }

    fn hosts_path(&self) -> Result<PathBuf> {
        let p = self.cfg.paths.hosts.clone().unwrap_or_else(|| self.out.join("hosts.csv"));
        require(&p)?;
        Ok(p)
    }

    fn load_regions(&self) -> Result<(Vec<RegionSet>, HierarchyTree)> {
        let sets = self
            .region_paths()?
            .iter()
            .enumerate()
            .map(|(g, p)| RegionSet::load(p, g, &self.cfg.paths.id_property))
            .collect::<Result<Vec<_>>>()?;
        let tree = build_hierarchy(&sets)?;
        Ok((sets, tree))
    }

    /// Hosts with coordinates are labelled from the polygons; file labels
    /// of the others must form tree paths.
    fn load_labelled_hosts(&self, sets: &[RegionSet], tree: &HierarchyTree) -> Result<(Vec<HostRecord>, Vec<(usize, String)>)> {
        let mut hosts = load_hosts(self.hosts_path()?)?;
        for (i, h) in hosts.iter().enumerate() {
            if let (None, Some(l)) = (h.coord, &h.labels) {
                if !tree.is_path(&l.per_granularity) {
                    return Err(Error::Label(format!(
                        "host #{i} ({}) has labels {:?} that are not a path of the hierarchy",
                        h.ip, l.per_granularity
                    )));
                }
            }
        }
        let failures = label_hosts(&mut hosts, sets, tree)
            .into_iter()
            .enumerate()
            .filter_map(|(i, u)| u.map(|u| (i, u.to_string())))
            .collect::<Vec<_>>();
        if !failures.is_empty() {
            log::warn!("{} hosts fall outside the region hierarchy", failures.len());
        }
        Ok((hosts, failures))
    }

    fn prepare(&self) -> Result<Prepared> {
        let (sets, tree) = self.load_regions()?;
        let (hosts, _) = self.load_labelled_hosts(&sets, &tree)?;
        let mut dataset = Dataset::new(hosts)?;
        let has_split = dataset.hosts.iter().any(|h| h.split != Split::Unlabeled);
        if !has_split {
            let ratio = self.cfg.train_ratio.unwrap_or(0.8);
            let splits = split_train_test(dataset.len(), ratio, self.cfg.train.seed ^ 0x5eed)?;
            dataset.set_splits(&splits);
        }
        Ok(Prepared { sets, tree, dataset })
    }

    fn synth(&self) -> Result<()> {
        let world = generate_synthetic(&self.cfg.synth)?;
        world.write(&self.out)?;
        println!(
            "wrote {} hosts over {:?} regions to {}",
            world.hosts.len(),
            world.tree.sizes(),
            self.out.display()
        );
        Ok(())
    }

    fn map_regions(&self) -> Result<()> {
        let (sets, tree) = self.load_regions()?;
        let (hosts, failures) = self.load_labelled_hosts(&sets, &tree)?;
        write_hosts_csv(self.out.join("labeled_hosts.csv"), &hosts, tree.granularity_count())?;
        let path = self.out.join("unassignable.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["ip", "reason"]).map_err(Error::from)?;
        for (i, reason) in &failures {
            w.write_record([hosts[*i].ip.as_str(), reason.as_str()]).map_err(Error::from)?;
        }
        w.flush().map_err(|e| io_error(&path, e))?;
        println!("labelled {} hosts, {} unassignable", hosts.len() - failures.len(), failures.len());
        Ok(())
    }

    fn build_hierarchy(&self) -> Result<()> {
        let (_, tree) = self.load_regions()?;
        tree.save(self.out.join("hierarchy_edges.csv"), self.out.join("hierarchy.json"))?;
        println!("hierarchy sizes {:?}", tree.sizes());
        Ok(())
    }

    fn cluster_hosts(&self) -> Result<()> {
        let p = self.prepare()?;
        let (clusters, rejected) = cluster_by_last_hop(&p.dataset.hosts);
        for r in &rejected {
            log::warn!("{}", r.reason);
        }
        clusters.write_csv(self.out.join("clusters.csv"), &p.dataset.hosts)?;
        p.dataset.split_csv(self.out.join("split.csv"))?;
        println!("{} clusters, {} hosts rejected", clusters.len(), rejected.len());
        Ok(())
    }

    fn train(&self, grid: bool, sweeps: &[SweepArg]) -> Result<()> {
        let p = self.prepare()?;
        let mut cfg = self.cfg.train.clone();
        for &s in sweeps {
            let (param, name) = match s {
                SweepArg::Alpha => (SweepParam::Alpha, "alpha"),
                SweepArg::Beta => (SweepParam::Beta, "beta"),
            };
            let rows = sweep(&p.dataset, &p.tree, &cfg, param, &unit_grid(), self.cfg.grid.validation_fraction)?;
            let path = self.out.join(format!("sweep_{name}.csv"));
            let mut w = csv_writer(&path)?;
            let mut header = vec![name.to_string(), "final_loss".into()];
            header.extend((1..=p.tree.granularity_count()).map(|g| format!("val_accuracy_g{g}")));
            w.write_record(&header).map_err(Error::from)?;
            for r in rows {
                let mut rec = vec![r.value.to_string(), r.final_loss.to_string()];
                rec.extend(r.val_accuracy.iter().map(f64::to_string));
                w.write_record(&rec).map_err(Error::from)?;
            }
            w.flush().map_err(|e| io_error(&path, e))?;
        }
        if grid {
            let ranked = grid_search(&p.dataset, &p.tree, &cfg, &self.cfg.grid)?;
            let path = self.out.join("grid.csv");
            let mut w = csv_writer(&path)?;
            let mut header: Vec<String> = ["lr", "hidden", "alpha", "beta", "lambda"].map(String::from).to_vec();
            header.extend((1..=p.tree.granularity_count()).map(|g| format!("val_accuracy_g{g}")));
            w.write_record(&header).map_err(Error::from)?;
            for r in &ranked {
                let c = &r.config;
                let lambda: Vec<String> = c.lambda.iter().map(f64::to_string).collect();
                let mut rec = vec![c.lr.to_string(), c.hidden.to_string(), c.alpha.to_string(), c.beta.to_string(), lambda.join(";")];
                rec.extend(r.val_accuracy.iter().map(f64::to_string));
                w.write_record(&rec).map_err(Error::from)?;
            }
            w.flush().map_err(|e| io_error(&path, e))?;
            cfg = ranked[0].config.clone();
            log::info!("grid winner lr={} hidden={} alpha={} beta={}", cfg.lr, cfg.hidden, cfg.alpha, cfg.beta);
        }
        let outcome = train(&p.dataset, &p.tree, &cfg)?;
        let extra = serde_json::json!({ "train": cfg });
        outcome.model.to_checkpoint(extra)?.save(self.out.join("checkpoint.json"))?;
        write_history_csv(self.out.join("history.csv"), &outcome.history)?;
        p.dataset.split_csv(self.out.join("split.csv"))?;
        if let Some(last) = outcome.history.last() {
            println!("epoch {} loss {:.6} train accuracy {:?}", last.epoch, last.loss, last.accuracy);
        }
        Ok(())
    }

    fn predict(&self, checkpoint: Option<PathBuf>) -> Result<()> {
        let ck_path = checkpoint.unwrap_or_else(|| self.out.join("checkpoint.json"));
        require(&ck_path)?;
        let model = HmcGeo::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
        let p = self.prepare()?;
        model.check_tree(&p.tree)?;
        let targets: Vec<usize> = (0..p.dataset.len()).filter(|&i| p.dataset.hosts[i].split != Split::Train).collect();
        let k = self.cfg.eval.ks.iter().copied().max().unwrap_or(1);
        let records = predict_hosts(&model, &p.dataset, &p.tree, &targets)?
            .into_iter()
            .map(|hp| PredictionRecord::from_scores(&p.dataset.hosts[hp.host].ip, hp.fallback, hp.scores, &p.tree, &p.sets, k))
            .collect::<Result<Vec<_>>>()?;
        write_predictions(self.out.join("predictions.jsonl"), &records)?;
        let fallback = records.iter().filter(|r| r.fallback).count();
        println!("predicted {} hosts ({fallback} by fallback)", records.len());
        Ok(())
    }

    fn evaluate(&self, predictions: Option<PathBuf>) -> Result<()> {
        let pred_path = predictions.unwrap_or_else(|| self.out.join("predictions.jsonl"));
        require(&pred_path)?;
        let records = read_predictions(&pred_path)?;
        let (sets, tree) = self.load_regions()?;
        let (hosts, _) = self.load_labelled_hosts(&sets, &tree)?;
        let truth: HashMap<String, Truth> = hosts
            .into_iter()
            .map(|h| {
                (
                    h.ip,
                    Truth {
                        labels: h.labels,
                        coord: h.coord,
                    },
                )
            })
            .collect();
        let centroids = CentroidTable::new(sets.last().expect("at least one region set"))?;
        let report = evaluate(&records, &truth, &tree, Some(&centroids), &self.cfg.eval.ks)?;
        report.save_json(self.out.join("metrics.json"))?;
        report.write_csv(self.out.join("metrics.csv"))?;
        for (summary, samples) in report.errors.iter().zip(&report.error_samples) {
            write_cdf_csv(self.out.join(format!("cdf_k{}.csv", summary.k)), samples)?;
        }
        for g in &report.granularities {
            println!("granularity {} accuracy {:.4} macro_f1 {:.4}", g.granularity, g.accuracy, g.macro_f1);
        }
        Ok(())
    }

    fn analyze(&self) -> Result<()> {
        let hosts = load_hosts(self.hosts_path()?)?;
        let mut batches: BTreeMap<String, Vec<_>> = BTreeMap::new();
        for h in &hosts {
            if let (Some(c), false) = (h.coord, h.last_hop.is_empty()) {
                batches.entry(h.last_hop.clone()).or_default().push(c);
            }
        }
        let batches: Vec<_> = batches.into_iter().collect();
        let a = &self.cfg.analysis;
        let report = hmcgeo::analysis::analyze_batches(&batches, a.eps_km, a.min_samples)?;
        report.write_summary_csv(self.out.join("cluster_summary.csv"))?;
        report.write_detail_csv(self.out.join("cluster_detail.csv"))?;
        println!("analyzed {} batches", batches.len());
        Ok(())
    }

    /// Exit status 3 when the check fails.
    fn grad_check(&self) -> Result<u8> {
        let gc = &self.cfg.gradcheck;
        let (toy, opts) = gc.toy(&self.cfg.train);
        let report = toy_gradient_check(&toy, opts)?;
        println!("max relative error {:e}", report.max_rel_error);
        if let (Some((name, i)), Some((a, n))) = (&report.worst, report.worst_values) {
            println!("worst coordinate {name}[{i}]: analytic {a:e}, numeric {n:e}");
        }
        println!(
            "max relative error above round-off {:e} ({} of {} coordinates below the round-off bound)",
            report.max_rel_error_resolved, report.unresolved, report.checked
        );
        let passed = if gc.resolved_only {
            report.passed_resolved()
        } else {
            report.passed()
        };
        if passed {
            println!("PASS (tolerance {:e})", report.tol);
            Ok(0)
        } else {
            println!("FAIL (tolerance {:e})", report.tol);
            Ok(3)
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(Error::from)
}
