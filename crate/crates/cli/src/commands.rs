use std::path::{Path, PathBuf};
use std::time::Instant;

use cfrl::data::DataConfig;
use cfrl::mining::RulePool;
use cfrl::model::{subgroup_stats, Hyperparameters};
use cfrl::sim::{run_recovery_with, splitmix64, write_recovery_csv};
use cfrl::{
    fit_vi, load_dataset, mine_rules, posterior_effect_summary, run_gibbs, run_recovery_study, search,
    trace_effect_summary, AnnealConfig, Dataset, GibbsConfig, RecoveryConfig, RuleList, VariationalConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::manifest::{write_json, FileDigest, RunManifest, Timings};
use crate::{FitArgs, GibbsArgs, InputArgs, MineArgs, RecoveryArgs, ReplayArgs, SearchArgs};

pub const POOL_FILE: &str = "pool.json";
pub const MODEL_FILE: &str = "model.json";
pub const EFFECTS_FILE: &str = "effects.csv";
pub const SCORE_TRACE_FILE: &str = "score_trace.csv";
pub const GIBBS_TRACE_FILE: &str = "gibbs_trace.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const RECOVERY_FILE: &str = "recovery.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cfrl::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 configuration, 3 input, 4 numerical, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        use cfrl::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) | CliError::Io { .. } | CliError::Json(_) => 3,
            CliError::Csv(_) => 1,
            CliError::Core(e) => match e {
                E::Config(_) | E::Parameter(_) => 2,
                E::Io { .. }
                | E::Parse { .. }
                | E::Schema(_)
                | E::Dimension(_)
                | E::DegenerateBinning { .. }
                | E::EmptyInput(_)
                | E::Json(_)
                | E::Csv(_) => 3,
                E::Numerical { .. } | E::NotPositiveDefinite { .. } => 4,
            },
        }
    }
}

/// Independent seed for the named stage of a run.
fn sub_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    splitmix64(u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes")))
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(|e| CliError::io(p, e))
}

fn prepare_out_dir(dir: &Path) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    absolute(dir)
}

impl InputArgs {
    fn resolve(&mut self) -> Result<(), CliError> {
        self.data = absolute(&self.data)?;
        self.spec = absolute(&self.spec)?;
        Ok(())
    }

    fn load(&self) -> Result<Dataset, CliError> {
        let cfg = DataConfig::from_json_file(&self.spec)?;
        let (data, table) = load_dataset(&self.data, &cfg)?;
        if table.dropped_rows() > 0 {
            log::warn!("dropped {} rows with a missing outcome or treatment", table.dropped_rows());
        }
        Ok(data)
    }

    fn digests(&self) -> Result<Vec<FileDigest>, CliError> {
        Ok(vec![FileDigest::of(&self.data)?, FileDigest::of(&self.spec)?])
    }
}

impl SearchArgs {
    fn anneal_config(&self, seed: u64) -> AnnealConfig {
        AnnealConfig {
            n_steps: self.steps,
            temperature: self.temperature,
            init_length: self.init_length,
            max_rules: self.max_rules,
            seed,
            ..AnnealConfig::default()
        }
    }
}

struct Finished {
    command: &'static str,
    seed: u64,
    config: serde_json::Value,
    resolved: serde_json::Value,
    inputs: Vec<FileDigest>,
    outputs: Vec<&'static str>,
}

fn finish(out_dir: &Path, f: Finished, start: Instant) -> Result<(), CliError> {
    let outputs = f
        .outputs
        .iter()
        .map(|name| FileDigest::of(&out_dir.join(name)))
        .collect::<Result<Vec<_>, _>>()?;
    RunManifest {
        command: f.command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: f.seed,
        config: f.config,
        resolved: f.resolved,
        inputs: f.inputs,
        outputs,
        timings: Timings {
            total_seconds: start.elapsed().as_secs_f64(),
        },
    }
    .write(out_dir)
}

pub fn mine(mut args: MineArgs) -> Result<(), CliError> {
    let start = Instant::now();
    args.input.resolve()?;
    args.out_dir = prepare_out_dir(&args.out_dir)?;
    let data = args.input.load()?;
    let names = data.rule_features.names();
    let pool = mine_rules(&data.rule_features, args.min_support, args.max_clauses)?;
    write_json(&args.out_dir.join(POOL_FILE), &pool.to_json(names))?;
    println!("{} binary features, {} rules", names.len(), pool.len());
    finish(
        &args.out_dir,
        Finished {
            command: "mine",
            seed: 0,
            config: serde_json::to_value(&args)?,
            resolved: serde_json::to_value(pool.params)?,
            inputs: args.input.digests()?,
            outputs: vec![POOL_FILE],
        },
        start,
    )
}

/// On-disk form of a fitted model.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    features: Vec<String>,
    rules: serde_json::Value,
    score: f64,
    hyperparameters: Hyperparameters,
    vi: VariationalConfig,
}

fn read_pool(path: &Path, names: &[String]) -> Result<RulePool, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(RulePool::from_json(&value, names)?)
}

fn subgroup_label(list: &RuleList, l: usize) -> String {
    list.rules().get(l).map_or_else(|| "DEFAULT".to_string(), |r| r.label.clone())
}

pub fn fit(mut args: FitArgs) -> Result<(), CliError> {
    let start = Instant::now();
    args.input.resolve()?;
    args.pool = absolute(&args.pool)?;
    args.out_dir = prepare_out_dir(&args.out_dir)?;
    let anneal_config = args.search.anneal_config(sub_seed(args.seed, "anneal"));
    anneal_config.validate()?;
    let data = args.input.load()?;
    let names = data.rule_features.names().to_vec();
    let pool = read_pool(&args.pool, &names)?;
    let hyper = Hyperparameters::defaults_for(&data);
    let result = search::anneal(&data, &pool, &hyper, &anneal_config)?;
    if !result.best_score.is_finite() {
        return Err(cfrl::Error::Numerical {
            iteration: 0,
            message: "no list in the search could be scored".into(),
        }
        .into());
    }
    let best = &result.best;
    let (q, _) = fit_vi(best, &data, &hyper, &anneal_config.vi)?;
    let summary = posterior_effect_summary(&q);
    let (_, stats) = subgroup_stats(best, &data)?;

    search::write_trace_csv(&result, args.out_dir.join(SCORE_TRACE_FILE))?;
    let model = ModelFile {
        features: names.clone(),
        rules: best.to_json(&names),
        score: result.best_score,
        hyperparameters: hyper,
        vi: anneal_config.vi,
    };
    write_json(&args.out_dir.join(MODEL_FILE), &serde_json::to_value(&model)?)?;
    let path = args.out_dir.join(EFFECTS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["subgroup", "conditions", "support", "effect_mean", "effect_sd"])?;
    println!("{:<4} {:<48} {:>7} {:>10} {:>8}", "", "conditions", "support", "effect", "sd");
    for (l, e) in summary.effect.iter().enumerate() {
        let label = subgroup_label(best, l);
        println!("{:<4} {:<48} {:>7} {:>10.4} {:>8.4}", l + 1, label, stats[l].n, e.mean, e.sd);
        w.write_record([
            (l + 1).to_string(),
            label,
            stats[l].n.to_string(),
            e.mean.to_string(),
            e.sd.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    println!("best score {:.4} after {} steps", result.best_score, anneal_config.n_steps);

    let mut inputs = args.input.digests()?;
    inputs.push(FileDigest::of(&args.pool)?);
    finish(
        &args.out_dir,
        Finished {
            command: "fit",
            seed: args.seed,
            config: serde_json::to_value(&args)?,
            resolved: serde_json::json!({ "anneal": anneal_config, "hyperparameters": hyper }),
            inputs,
            outputs: vec![MODEL_FILE, EFFECTS_FILE, SCORE_TRACE_FILE],
        },
        start,
    )
}

pub fn gibbs(mut args: GibbsArgs) -> Result<(), CliError> {
    let start = Instant::now();
    args.input.resolve()?;
    args.model = absolute(&args.model)?;
    args.out_dir = prepare_out_dir(&args.out_dir)?;
    let config = GibbsConfig {
        burn_in: args.burn_in.unwrap_or(args.gibbs_steps / 5),
        ..GibbsConfig::with_steps(args.gibbs_steps)
    };
    config.validate()?;
    let text = std::fs::read_to_string(&args.model).map_err(|e| CliError::io(&args.model, e))?;
    let model: ModelFile =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", args.model.display())))?;
    let data = args.input.load()?;
    let names = data.rule_features.names();
    if model.features != names {
        return Err(CliError::Input(
            "model features differ from the binarized dataset; use the data and spec it was fitted on".into(),
        ));
    }
    let list = RuleList::from_json(&model.rules, names)?;
    let hyper = model.hyperparameters;
    let seed = sub_seed(args.seed, "gibbs");
    let trace = run_gibbs(&list, &data, &hyper, &config, seed)?;
    let gibbs_summary = trace_effect_summary(&trace)?;
    let (q, _) = fit_vi(&list, &data, &hyper, &model.vi)?;
    let vi_summary = posterior_effect_summary(&q);

    cfrl::gibbs::write_trace_csv(&trace, args.out_dir.join(GIBBS_TRACE_FILE))?;
    let path = args.out_dir.join(COMPARISON_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "subgroup",
        "conditions",
        "vi_mean",
        "vi_sd",
        "gibbs_mean",
        "gibbs_sd",
        "abs_mean_diff",
    ])?;
    for (l, (v, g)) in vi_summary.effect.iter().zip(&gibbs_summary).enumerate() {
        let diff = (v.mean - g.mean).abs();
        println!(
            "subgroup {}: vi {:.4} ({:.4}), gibbs {:.4} ({:.4}), |diff| {:.4}",
            l + 1,
            v.mean,
            v.sd,
            g.mean,
            g.sd,
            diff
        );
        w.write_record([
            (l + 1).to_string(),
            subgroup_label(&list, l),
            v.mean.to_string(),
            v.sd.to_string(),
            g.mean.to_string(),
            g.sd.to_string(),
            diff.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let mut inputs = args.input.digests()?;
    inputs.push(FileDigest::of(&args.model)?);
    finish(
        &args.out_dir,
        Finished {
            command: "gibbs",
            seed: args.seed,
            config: serde_json::to_value(&args)?,
            resolved: serde_json::json!({ "gibbs": config, "chain_seed": seed, "vi": model.vi }),
            inputs,
            outputs: vec![GIBBS_TRACE_FILE, COMPARISON_FILE],
        },
        start,
    )
}

pub fn recovery(mut args: RecoveryArgs) -> Result<(), CliError> {
    let start = Instant::now();
    args.out_dir = prepare_out_dir(&args.out_dir)?;
    let config = RecoveryConfig {
        sizes: args.sizes.clone(),
        replicates: args.replicates,
        seed: args.seed,
        ..RecoveryConfig::default()
    };
    let anneal_config = args.search.anneal_config(0);
    let report = if args.oracle {
        run_recovery_with(&config, |inst, _| Ok(inst.truth.clone()))?
    } else {
        run_recovery_study(&config, None, &anneal_config)?
    };
    write_recovery_csv(&report.rows, args.out_dir.join(RECOVERY_FILE))?;
    for r in &report.rows {
        println!("N = {}: mean distance {:.3} (sd {:.3}, {} replicates)", r.n, r.mean_distance, r.sd, r.n_ok);
    }
    finish(
        &args.out_dir,
        Finished {
            command: "recovery",
            seed: args.seed,
            config: serde_json::to_value(&args)?,
            resolved: serde_json::json!({ "recovery": config, "anneal": anneal_config }),
            inputs: Vec::new(),
            outputs: vec![RECOVERY_FILE],
        },
        start,
    )
}

pub fn replay(args: ReplayArgs) -> Result<(), CliError> {
    let manifest = RunManifest::read(&args.manifest)?;
    manifest.verify_inputs()?;
    let mut config = manifest.config.clone();
    let out_dir = absolute(&args.out_dir)?;
    config["out_dir"] = serde_json::to_value(&out_dir)?;
    let parse_err = |e: serde_json::Error| CliError::Input(format!("manifest config: {e}"));
    match manifest.command.as_str() {
        "mine" => mine(serde_json::from_value(config).map_err(parse_err)?),
        "fit" => fit(serde_json::from_value(config).map_err(parse_err)?),
        "gibbs" => gibbs(serde_json::from_value(config).map_err(parse_err)?),
        "recovery" => recovery(serde_json::from_value(config).map_err(parse_err)?),
        other => Err(CliError::Input(format!("unknown command `{other}` in manifest"))),
    }
}
