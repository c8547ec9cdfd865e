//! Experiment configuration: a single JSON document. Parsing is strict
//! (unknown fields rejected) and validation reports the dotted path of
//! every missing or malformed field.

use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub command: Option<String>,
    pub kernel: Option<RawKernel>,
    pub grid: Option<RawGrid>,
    pub energy: Option<RawEnergy>,
    pub datum: Option<RawDatum>,
    pub optimizer: Option<RawOptimizer>,
    pub sweep: Option<RawSweep>,
    pub output_dir: Option<String>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub bound_trials: Option<usize>,
    pub operator_cache: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawKernel {
    pub n: Option<usize>,
    pub s: Option<f64>,
    pub delta: Option<f64>,
    pub a0: Option<f64>,
    pub b0: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGrid {
    #[serde(rename = "box")]
    pub box_: Option<RawBox>,
    pub h: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawBox {
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum RawEnergy {
    Quadratic {
        alpha: f64,
    },
    PolyCoercive {
        alpha: f64,
        beta: f64,
        gamma1: f64,
        p: f64,
        q: f64,
        #[serde(default)]
        barrier_gamma2: Option<f64>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RawDatum {
    Zero,
    Identity,
    Affine {
        matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
    PerturbedAffine {
        matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
        amp: f64,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawOptimizer {
    pub max_iter: Option<usize>,
    pub grad_tol: Option<f64>,
    pub memory: Option<usize>,
    pub ls_c1: Option<f64>,
    pub ls_c2: Option<f64>,
    pub ls_max_steps: Option<usize>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RawSweep {
    pub s: Option<Vec<f64>>,
    pub delta: Option<Vec<f64>>,
    pub h: Option<Vec<f64>>,
}

/// Validated experiment description.
#[derive(Debug, Clone)]
pub struct Config {
    pub command: CommandKind,
    pub kernel: KernelBlock,
    pub grid: GridBlock,
    pub energy: Option<EnergyBlock>,
    pub datum: Option<DatumBlock>,
    pub optimizer: OptimizerBlock,
    pub sweep: SweepBlock,
    pub output_dir: String,
    pub threads: Option<usize>,
    pub seed: u64,
    pub bound_trials: usize,
    pub operator_cache: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Identities,
    Minimize,
    Poincare,
    Sweep,
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::Identities => "identities",
            CommandKind::Minimize => "minimize",
            CommandKind::Poincare => "poincare",
            CommandKind::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KernelBlock {
    pub n: usize,
    pub s: f64,
    pub delta: f64,
    pub a0: f64,
    pub b0: f64,
}

#[derive(Debug, Clone)]
pub struct GridBlock {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub h: f64,
}

#[derive(Debug, Clone, Copy)]
pub enum EnergyBlock {
    Quadratic {
        alpha: f64,
    },
    PolyCoercive {
        alpha: f64,
        beta: f64,
        gamma1: f64,
        p: f64,
        q: f64,
        barrier_gamma2: Option<f64>,
    },
}

#[derive(Debug, Clone)]
pub enum DatumBlock {
    Zero,
    Identity,
    Affine {
        matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
        amp: f64,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizerBlock {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub memory: usize,
    pub ls_c1: f64,
    pub ls_c2: f64,
    pub ls_max_steps: usize,
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-8,
            memory: 10,
            ls_c1: 1e-4,
            ls_c2: 0.9,
            ls_max_steps: 40,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepBlock {
    pub s: Vec<f64>,
    pub delta: Vec<f64>,
    pub h: Vec<f64>,
}

/// Configuration error carrying a dotted field path.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

fn need<T>(v: Option<T>, path: &str) -> Result<T, ConfigError> {
    v.ok_or_else(|| ConfigError(format!("missing field `{path}`")))
}

pub fn parse_and_validate(text: &str, expected: CommandKind) -> Result<Config, ConfigError> {
    let raw: RawConfig =
        serde_json::from_str(text).map_err(|e| ConfigError(format!("invalid JSON: {e}")))?;
    if let Some(cmd) = &raw.command {
        if cmd != expected.name() {
            return Err(ConfigError(format!(
                "field `command` is \"{cmd}\" but the `{}` subcommand was invoked",
                expected.name()
            )));
        }
    }

    let kernel = {
        let k = need(raw.kernel, "kernel")?;
        let n = need(k.n, "kernel.n")?;
        if n != 2 && n != 3 {
            return Err(ConfigError("field `kernel.n` must be 2 or 3".into()));
        }
        let s = need(k.s, "kernel.s")?;
        if !(0.0..=1.0).contains(&s) || s == 0.0 || s == 1.0 {
            return Err(ConfigError(
                "field `kernel.s` must lie strictly between 0 and 1".into(),
            ));
        }
        let delta = need(k.delta, "kernel.delta")?;
        if delta <= 0.0 {
            return Err(ConfigError("field `kernel.delta` must be positive".into()));
        }
        KernelBlock {
            n,
            s,
            delta,
            a0: k.a0.unwrap_or(1.0),
            b0: k.b0.unwrap_or(0.5),
        }
    };

    let grid = {
        let g = need(raw.grid, "grid")?;
        let b = need(g.box_, "grid.box")?;
        let lower = need(b.lower, "grid.box.lower")?;
        let upper = need(b.upper, "grid.box.upper")?;
        if lower.len() != kernel.n || upper.len() != kernel.n {
            return Err(ConfigError(format!(
                "fields `grid.box.lower`/`grid.box.upper` must have {} entries",
                kernel.n
            )));
        }
        let h = need(g.h, "grid.h")?;
        if h <= 0.0 {
            return Err(ConfigError("field `grid.h` must be positive".into()));
        }
        GridBlock { lower, upper, h }
    };

    let energy = raw.energy.map(|e| match e {
        RawEnergy::Quadratic { alpha } => EnergyBlock::Quadratic { alpha },
        RawEnergy::PolyCoercive {
            alpha,
            beta,
            gamma1,
            p,
            q,
            barrier_gamma2,
        } => EnergyBlock::PolyCoercive {
            alpha,
            beta,
            gamma1,
            p,
            q,
            barrier_gamma2,
        },
    });

    let datum = match raw.datum {
        None => None,
        Some(RawDatum::Zero) => Some(DatumBlock::Zero),
        Some(RawDatum::Identity) => Some(DatumBlock::Identity),
        Some(RawDatum::Affine { matrix, offset }) => {
            Some(validate_affine(matrix, offset, 0.0, kernel.n)?)
        }
        Some(RawDatum::PerturbedAffine {
            matrix,
            offset,
            amp,
        }) => Some(validate_affine(matrix, offset, amp, kernel.n)?),
    };

    let optimizer = raw
        .optimizer
        .map(|o| {
            let d = OptimizerBlock::default();
            OptimizerBlock {
                max_iter: o.max_iter.unwrap_or(d.max_iter),
                grad_tol: o.grad_tol.unwrap_or(d.grad_tol),
                memory: o.memory.unwrap_or(d.memory),
                ls_c1: o.ls_c1.unwrap_or(d.ls_c1),
                ls_c2: o.ls_c2.unwrap_or(d.ls_c2),
                ls_max_steps: o.ls_max_steps.unwrap_or(d.ls_max_steps),
            }
        })
        .unwrap_or_default();

    let sweep = raw
        .sweep
        .map(|s| SweepBlock {
            s: s.s.unwrap_or_default(),
            delta: s.delta.unwrap_or_default(),
            h: s.h.unwrap_or_default(),
        })
        .unwrap_or_default();

    match expected {
        CommandKind::Minimize => {
            if energy.is_none() {
                return Err(ConfigError(
                    "missing field `energy` (required by minimize)".into(),
                ));
            }
            if datum.is_none() {
                return Err(ConfigError(
                    "missing field `datum` (required by minimize)".into(),
                ));
            }
        }
        CommandKind::Sweep
            if sweep.s.is_empty() && sweep.delta.is_empty() && sweep.h.is_empty() =>
        {
            return Err(ConfigError(
                "field `sweep` must provide at least one nonempty axis for the sweep command"
                    .into(),
            ));
        }
        _ => {}
    }

    Ok(Config {
        command: expected,
        kernel,
        grid,
        energy,
        datum,
        optimizer,
        sweep,
        output_dir: raw.output_dir.unwrap_or_else(|| "out".into()),
        threads: raw.threads,
        seed: raw.seed.unwrap_or(0),
        bound_trials: raw.bound_trials.unwrap_or(200),
        operator_cache: raw.operator_cache,
    })
}

fn validate_affine(
    matrix: Vec<Vec<f64>>,
    offset: Vec<f64>,
    amp: f64,
    n: usize,
) -> Result<DatumBlock, ConfigError> {
    if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
        return Err(ConfigError(format!(
            "field `datum.matrix` must be a {n}x{n} matrix"
        )));
    }
    if offset.len() != n {
        return Err(ConfigError(format!(
            "field `datum.offset` must have {n} entries"
        )));
    }
    Ok(DatumBlock::Affine {
        matrix,
        offset,
        amp,
    })
}
