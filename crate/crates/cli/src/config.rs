//! Experiment configuration: one JSON file per experiment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fkloopgas::gibbs::RunConfig;
use fkloopgas::graph::{Graph, LatticeKind};
use fkloopgas::params::ModelParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GraphSpec {
    Lattice { lattice: LatticeKind, radius: usize },
    Path { n: usize },
    Complete { n: usize },
    /// Edge-list file, resolved relative to the config file.
    EdgeList { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunBlock {
    pub chains: usize,
    pub burn_in: usize,
    pub samples: usize,
    pub thin: usize,
    pub seed: u64,
    /// Gauss–Legendre nodes of the thermodynamic integration.
    pub nodes: usize,
}

impl Default for RunBlock {
    fn default() -> Self {
        Self { chains: 4, burn_in: 1_000, samples: 2_000, thin: 10, seed: 1, nodes: 6 }
    }
}

impl RunBlock {
    pub fn run_config(&self) -> RunConfig {
        RunConfig { chains: self.chains, burn_in: self.burn_in, samples: self.samples, thin: self.thin, seed: self.seed }
    }
}

/// Vertex sets as index lists; an absent `lambda` means the whole graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeBlock {
    pub lambda: Option<Vec<usize>>,
    pub lambda0: Vec<usize>,
    pub lambda_prime: Vec<usize>,
    /// Boundary particles `(vertex, position)` outside `lambda`.
    pub boundary: Vec<(u32, Vec<f64>)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdmkArgs {
    pub x: Vec<(usize, Vec<f64>)>,
    pub y: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdmkBlock {
    pub arguments: Vec<RdmkArgs>,
    pub replicas: usize,
    pub inner_samples: usize,
    pub inner_thin: usize,
}

impl Default for RdmkBlock {
    fn default() -> Self {
        Self { arguments: Vec::new(), replicas: 2, inner_samples: 20, inner_thin: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatKernelBlock {
    pub times: Vec<f64>,
    pub nodes: usize,
}

impl Default for HeatKernelBlock {
    fn default() -> Self {
        Self { times: vec![0.3, 1.0, 3.0], nodes: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleBlock {
    pub grid_points: usize,
    pub k_cap: usize,
    pub fourier_modes: usize,
    pub n_cap: usize,
}

impl Default for OracleBlock {
    fn default() -> Self {
        Self { grid_points: 3, k_cap: 20, fourier_modes: 1, n_cap: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MwBlock {
    pub ns: Vec<usize>,
    /// Ball radii of the invariance experiment, which samples the whole
    /// ball and so needs far smaller sizes than the profile scans.
    pub invariance_ns: Vec<usize>,
    pub theta: f64,
    pub with_boundary: bool,
    /// Largest ball on which the Lipschitz scan is exhaustive.
    pub scan_limit: usize,
}

impl Default for MwBlock {
    fn default() -> Self {
        Self { ns: vec![16, 32, 64], invariance_ns: vec![1, 2, 4, 8], theta: 0.1, with_boundary: true, scan_limit: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailBlock {
    pub ns: Vec<usize>,
    pub draws: u64,
}

impl Default for TailBlock {
    fn default() -> Self {
        Self { ns: vec![8, 55, 403], draws: 100_000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateBlock {
    /// Overrides the derived Θ.
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    pub graph: GraphSpec,
    #[serde(default)]
    pub run: RunBlock,
    #[serde(default)]
    pub volumes: VolumeBlock,
    #[serde(default)]
    pub rdmk: RdmkBlock,
    #[serde(default)]
    pub heat_kernel: HeatKernelBlock,
    #[serde(default)]
    pub oracle: OracleBlock,
    #[serde(default)]
    pub mw: MwBlock,
    #[serde(default)]
    pub tail: TailBlock,
    #[serde(default)]
    pub gate: GateBlock,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).context("config does not match the schema")?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.run.chains == 0 || self.run.samples == 0 {
            bail!("run.chains and run.samples must be positive");
        }
        if self.run.nodes == 0 {
            bail!("run.nodes must be positive");
        }
        Ok(())
    }

    pub fn build_graph(&self) -> Result<Graph> {
        Ok(match &self.graph {
            GraphSpec::Lattice { lattice, radius } => Graph::lattice_ball(*lattice, *radius),
            GraphSpec::Path { n } => Graph::path(*n),
            GraphSpec::Complete { n } => Graph::complete(*n),
            GraphSpec::EdgeList { path } => {
                let full = self.base_dir.join(path);
                let text = std::fs::read_to_string(&full).with_context(|| format!("reading {}", full.display()))?;
                Graph::parse_edge_list(&text)?
            }
        })
    }

    /// SHA-256 of the canonical JSON of everything that determines the
    /// numbers, i.e. the config without seed, output directory and worker
    /// count. Object keys are sorted, so field order in the file is
    /// irrelevant.
    pub fn params_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("workers");
            obj.remove("out");
            if let Some(run) = obj.get_mut("run").and_then(|r| r.as_object_mut()) {
                run.remove("seed");
            }
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
