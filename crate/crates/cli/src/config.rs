//! Configuration resolution: defaults, then the optional TOML file, then
//! command-line flags, with flags winning. The fully resolved parameter set
//! is serialized into every meta.json together with its SHA-256 hash, so a
//! run can always be traced back to the exact configuration that produced
//! it.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use drband::bands::{BandTarget, ScaleMethod, WeightsMode};
use drband::data::{self, ColumnSpec, Transform};
use drband::{Dataset, Loss, MassPolicy, SieveConfig};

use crate::CliError;

/// Bandwidth resolution strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    Fixed,
    Cv,
    Undersmooth,
    Lepski,
}

impl TuningMode {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "fixed" => Ok(TuningMode::Fixed),
            "cv" => Ok(TuningMode::Cv),
            "undersmooth" => Ok(TuningMode::Undersmooth),
            "lepski" => Ok(TuningMode::Lepski),
            other => Err(CliError::config(format!(
                "unknown tuning mode '{other}' (expected fixed|cv|undersmooth|lepski)"
            ))),
        }
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TuningMode::Fixed => "fixed",
            TuningMode::Cv => "cv",
            TuningMode::Undersmooth => "undersmooth",
            TuningMode::Lepski => "lepski",
        };
        f.write_str(s)
    }
}

/// Optional TOML configuration file; every key has a flag counterpart.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub y: Option<String>,
    pub t: Option<String>,
    pub x: Option<Vec<String>>,
    pub loss: Option<String>,
    pub target: Option<String>,
    pub levels: Option<Vec<f64>>,
    pub bootstrap: Option<usize>,
    pub seed: Option<u64>,
    pub tuning: Option<String>,
    pub grid: Option<String>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub weights: Option<String>,
    pub k1: Option<usize>,
    pub k2: Option<usize>,
    pub h: Option<f64>,
    pub folds: Option<usize>,
    pub scale: Option<String>,
    pub y_transform: Option<String>,
    pub t_transform: Option<String>,
    pub normalize_x: Option<bool>,
    pub mass_multiplier: Option<f64>,
    pub max_drop_frac: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))
    }
}

/// Flag values shared by every command; `None` means "not given".
#[derive(Debug, Clone, Default, clap::Args)]
pub struct CommonArgs {
    /// Input CSV file with a header row.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,

    /// TOML configuration file; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Outcome column name.
    #[arg(long = "y-col", global = true)]
    pub y: Option<String>,

    /// Treatment column name.
    #[arg(long = "t-col", global = true)]
    pub t: Option<String>,

    /// Covariate column names, comma separated; default all other columns.
    #[arg(long = "x-cols", global = true, value_delimiter = ',')]
    pub x: Option<Vec<String>>,

    /// Loss: squared | quantile:q.
    #[arg(long, global = true)]
    pub loss: Option<String>,

    /// Inference target: g | gprime | tau.
    #[arg(long, global = true)]
    pub target: Option<String>,

    /// Confidence levels, comma separated, each in (0,1).
    #[arg(long, global = true, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,

    /// Bootstrap replications B.
    #[arg(long, global = true)]
    pub bootstrap: Option<usize>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Bandwidth strategy: fixed | cv | undersmooth | lepski.
    #[arg(long, global = true)]
    pub tuning: Option<String>,

    /// Evaluation grid "min:max:count"; default 25 points between the
    /// 5th and 95th treatment percentiles.
    #[arg(long, global = true)]
    pub grid: Option<String>,

    /// Worker threads; default all available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Weighting: sieve | naive.
    #[arg(long, global = true)]
    pub weights: Option<String>,

    /// Treatment sieve degree K1.
    #[arg(long, global = true)]
    pub k1: Option<usize>,

    /// Covariate sieve degree K2.
    #[arg(long, global = true)]
    pub k2: Option<usize>,

    /// Fixed bandwidth (required when --tuning fixed).
    #[arg(long, global = true)]
    pub h: Option<f64>,

    /// Cross-validation folds.
    #[arg(long, global = true)]
    pub folds: Option<usize>,

    /// Scale estimator: sd | iqr.
    #[arg(long, global = true)]
    pub scale: Option<String>,

    /// Outcome transform: none | log:offset | boxcox:l1,l2.
    #[arg(long = "y-transform", global = true)]
    pub y_transform: Option<String>,

    /// Treatment transform: none | log:offset | boxcox:l1,l2.
    #[arg(long = "t-transform", global = true)]
    pub t_transform: Option<String>,

    /// Min-max normalize covariate columns before estimation.
    #[arg(long = "normalize-x", global = true)]
    pub normalize_x: bool,

    /// Kernel mass floor multiplier.
    #[arg(long = "mass-multiplier", global = true)]
    pub mass_multiplier: Option<f64>,

    /// Largest tolerated fraction of dropped bootstrap replicates.
    #[arg(long = "max-drop-frac", global = true)]
    pub max_drop_frac: Option<f64>,
}

/// Fully resolved run parameters, embedded in meta.json.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub input: Option<PathBuf>,
    pub y: String,
    pub t: String,
    /// Empty means "all remaining columns".
    pub x: Vec<String>,
    pub loss: Loss,
    pub target: BandTarget,
    /// None means "command default".
    pub levels: Option<Vec<f64>>,
    /// None means "command default".
    pub bootstrap: Option<usize>,
    pub seed: u64,
    pub tuning: TuningMode,
    pub grid: Option<String>,
    pub weights: String,
    pub k1: usize,
    pub k2: usize,
    pub h: Option<f64>,
    pub folds: usize,
    pub scale: ScaleMethod,
    pub y_transform: String,
    pub t_transform: String,
    pub normalize_x: bool,
    /// None means "command default".
    pub mass_multiplier: Option<f64>,
    /// None means "command default".
    pub max_drop_frac: Option<f64>,
    pub out: PathBuf,
    #[serde(skip)]
    pub threads: Option<usize>,
}

fn parse_loss(s: &str) -> Result<Loss, CliError> {
    if s == "squared" {
        return Ok(Loss::Squared);
    }
    if let Some(q) = s.strip_prefix("quantile:") {
        let q: f64 = q
            .parse()
            .map_err(|_| CliError::config(format!("bad quantile level '{q}'")))?;
        return Loss::quantile(q)
            .map_err(|e| CliError::config(format!("bad loss '{s}': {e}")));
    }
    Err(CliError::config(format!(
        "unknown loss '{s}' (expected squared|quantile:q)"
    )))
}

fn parse_target(s: &str) -> Result<BandTarget, CliError> {
    match s {
        "g" => Ok(BandTarget::G),
        "gprime" => Ok(BandTarget::GPrime),
        "tau" => Ok(BandTarget::Tau),
        other => Err(CliError::config(format!(
            "unknown target '{other}' (expected g|gprime|tau)"
        ))),
    }
}

fn parse_scale(s: &str) -> Result<ScaleMethod, CliError> {
    match s {
        "sd" => Ok(ScaleMethod::BootstrapSd),
        "iqr" => Ok(ScaleMethod::NormalizedIqr),
        other => Err(CliError::config(format!(
            "unknown scale '{other}' (expected sd|iqr)"
        ))),
    }
}

/// Parse "none" | "log:offset" | "boxcox:l1,l2".
pub fn parse_transform(s: &str) -> Result<Transform, CliError> {
    if s == "none" {
        return Ok(Transform::None);
    }
    if let Some(rest) = s.strip_prefix("log:") {
        let offset: f64 = rest
            .parse()
            .map_err(|_| CliError::config(format!("bad log offset '{rest}'")))?;
        return Ok(Transform::Log { offset });
    }
    if let Some(rest) = s.strip_prefix("boxcox:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 2 {
            return Err(CliError::config(format!(
                "Box-Cox transform needs two parameters, got '{rest}'"
            )));
        }
        let lambda1: f64 = parts[0]
            .parse()
            .map_err(|_| CliError::config(format!("bad Box-Cox lambda1 '{}'", parts[0])))?;
        let lambda2: f64 = parts[1]
            .parse()
            .map_err(|_| CliError::config(format!("bad Box-Cox lambda2 '{}'", parts[1])))?;
        return Ok(Transform::BoxCox { lambda1, lambda2 });
    }
    Err(CliError::config(format!(
        "unknown transform '{s}' (expected none|log:offset|boxcox:l1,l2)"
    )))
}

/// Parse "min:max:count" into an equispaced grid.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(CliError::config(format!(
            "grid spec '{s}' must be min:max:count"
        )));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| CliError::config(format!("bad grid minimum '{}'", parts[0])))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| CliError::config(format!("bad grid maximum '{}'", parts[1])))?;
    let count: usize = parts[2]
        .parse()
        .map_err(|_| CliError::config(format!("bad grid count '{}'", parts[2])))?;
    if !(hi > lo) || count == 0 {
        return Err(CliError::config(format!(
            "grid spec '{s}' needs max > min and count >= 1"
        )));
    }
    Ok(data::equispaced(lo, hi, count))
}

impl Resolved {
    /// Defaults < config file < flags.
    pub fn build(args: &CommonArgs) -> Result<Resolved, CliError> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let loss_s = args
            .loss
            .clone()
            .or(file.loss)
            .unwrap_or_else(|| "squared".into());
        let target_s = args
            .target
            .clone()
            .or(file.target)
            .unwrap_or_else(|| "g".into());
        let tuning_s = args
            .tuning
            .clone()
            .or(file.tuning)
            .unwrap_or_else(|| "cv".into());
        let scale_s = args
            .scale
            .clone()
            .or(file.scale)
            .unwrap_or_else(|| "sd".into());
        let weights = args
            .weights
            .clone()
            .or(file.weights)
            .unwrap_or_else(|| "sieve".into());
        if weights != "sieve" && weights != "naive" {
            return Err(CliError::config(format!(
                "unknown weights '{weights}' (expected sieve|naive)"
            )));
        }
        let levels = args.levels.clone().or(file.levels);
        if let Some(levels) = &levels {
            if levels.is_empty() || levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
                return Err(CliError::config(format!(
                    "levels must lie strictly inside (0,1), got {levels:?}"
                )));
            }
        }
        let y_transform = args
            .y_transform
            .clone()
            .or(file.y_transform)
            .unwrap_or_else(|| "none".into());
        let t_transform = args
            .t_transform
            .clone()
            .or(file.t_transform)
            .unwrap_or_else(|| "none".into());
        parse_transform(&y_transform)?;
        parse_transform(&t_transform)?;
        let grid = args.grid.clone().or(file.grid);
        if let Some(g) = &grid {
            parse_grid(g)?;
        }
        let tuning = TuningMode::parse(&tuning_s)?;
        let h = args.h.or(file.h);
        if tuning == TuningMode::Fixed && h.is_none() {
            return Err(CliError::config(
                "--tuning fixed requires an explicit --h".into(),
            ));
        }
        let resolved = Resolved {
            input: args.input.clone().or(file.input),
            y: args.y.clone().or(file.y).unwrap_or_else(|| "y".into()),
            t: args.t.clone().or(file.t).unwrap_or_else(|| "t".into()),
            x: args.x.clone().or(file.x).unwrap_or_default(),
            loss: parse_loss(&loss_s)?,
            target: parse_target(&target_s)?,
            levels,
            bootstrap: args.bootstrap.or(file.bootstrap),
            seed: args.seed.or(file.seed).unwrap_or(17),
            tuning,
            grid,
            weights,
            k1: args.k1.or(file.k1).unwrap_or(2),
            k2: args.k2.or(file.k2).unwrap_or(1),
            h,
            folds: args.folds.or(file.folds).unwrap_or(drband::tuning::DEFAULT_FOLDS),
            scale: parse_scale(&scale_s)?,
            y_transform,
            t_transform,
            normalize_x: args.normalize_x || file.normalize_x.unwrap_or(false),
            mass_multiplier: args.mass_multiplier.or(file.mass_multiplier),
            max_drop_frac: args.max_drop_frac.or(file.max_drop_frac),
            out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from(".")),
            threads: args.threads.or(file.threads),
        };
        Ok(resolved)
    }

    pub fn levels_or(&self, default: &[f64]) -> Vec<f64> {
        self.levels.clone().unwrap_or_else(|| default.to_vec())
    }

    pub fn bootstrap_or(&self, default: usize) -> usize {
        self.bootstrap.unwrap_or(default)
    }

    pub fn mass_policy(&self) -> MassPolicy {
        match self.mass_multiplier {
            Some(multiplier) => MassPolicy { multiplier },
            None => MassPolicy::default(),
        }
    }

    pub fn drop_frac(&self) -> f64 {
        self.max_drop_frac.unwrap_or(drband::bands::MAX_DROP_FRAC)
    }

    pub fn weights_mode(&self) -> WeightsMode {
        if self.weights == "naive" {
            WeightsMode::Naive
        } else {
            WeightsMode::Sieve(SieveConfig::new(self.k1, self.k2))
        }
    }

    /// Load, transform, and normalize the input dataset.
    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| CliError::config("no --input file given".into()))?;
        let columns = ColumnSpec {
            y: self.y.clone(),
            t: self.t.clone(),
            x: self.x.clone(),
        };
        let ds = data::read_csv(input, &columns)?;
        let y = parse_transform(&self.y_transform)?.apply(ds.y(), &self.y)?;
        let t = parse_transform(&self.t_transform)?.apply(ds.t(), &self.t)?;
        let mut x_rows: Vec<Vec<f64>> = (0..ds.n()).map(|i| ds.x_row(i).to_vec()).collect();
        if self.normalize_x {
            minmax_normalize(&mut x_rows);
        }
        Ok(Dataset::new(y, t, x_rows)?)
    }

    /// Explicit grid if given, else the dataset's default grid.
    pub fn eval_grid(&self, ds: &Dataset) -> Result<Vec<f64>, CliError> {
        match &self.grid {
            Some(spec) => parse_grid(spec),
            None => Ok(ds.default_grid()),
        }
    }

    /// SHA-256 over the canonical JSON of the resolved parameters.
    pub fn sha256(&self) -> Result<String, CliError> {
        let canon = serde_json::to_vec(self).map_err(drband::Error::from)?;
        let digest = Sha256::digest(&canon);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Rescale each covariate column to [0,1]; constant columns map to 0.5.
fn minmax_normalize(x_rows: &mut [Vec<f64>]) {
    if x_rows.is_empty() {
        return;
    }
    let dx = x_rows[0].len();
    for j in 0..dx {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in x_rows.iter() {
            lo = lo.min(row[j]);
            hi = hi.max(row[j]);
        }
        let span = hi - lo;
        for row in x_rows.iter_mut() {
            row[j] = if span > 0.0 { (row[j] - lo) / span } else { 0.5 };
        }
    }
}
