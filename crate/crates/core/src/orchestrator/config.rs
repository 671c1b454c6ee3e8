//! Experiment and matrix configuration (TOML, unknown keys rejected).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::{CompensationForm, CompensationMode, PfedmeHyper};
use crate::datagen::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelSpec, TrainHyper};
use crate::netsim::insufficient_count;

use super::SelectionPolicy;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    FedAvg,
    QFedAvg,
    PFedMe,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::QFedAvg => "qfedavg",
            Algorithm::PFedMe => "pfedme",
        }
    }
}

/// An algorithm together with its loss handling, e.g. `qfedavg` or `tra-qfedavg`.
///
/// Without the `tra-` prefix the run uses threshold-biased selection;
/// `<algo>-biased` is accepted as an alias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Variant {
    pub algorithm: Algorithm,
    pub tra: bool,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.tra {
            write!(f, "tra-{}", self.algorithm.name())
        } else {
            f.write_str(self.algorithm.name())
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (tra, rest) = match s.strip_prefix("tra-") {
            Some(rest) => (true, rest),
            None => (false, s.strip_suffix("-biased").unwrap_or(s)),
        };
        let algorithm = match rest {
            "fedavg" => Algorithm::FedAvg,
            "qfedavg" => Algorithm::QFedAvg,
            "pfedme" => Algorithm::PFedMe,
            _ => return Err(Error::Config(format!("unknown algorithm variant '{s}'"))),
        };
        Ok(Variant { algorithm, tra })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

/// Named Synthetic datasets used throughout the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetPreset {
    Iid,
    Het05,
    Het1,
    Het2,
}

impl DatasetPreset {
    pub const ALL: [DatasetPreset; 4] = [Self::Iid, Self::Het05, Self::Het1, Self::Het2];

    /// Name used in configs: `iid`, `(0.5,0.5)`, `(1,1)`, `(2,2)`.
    pub fn label(self) -> &'static str {
        match self {
            Self::Iid => "iid",
            Self::Het05 => "(0.5,0.5)",
            Self::Het1 => "(1,1)",
            Self::Het2 => "(2,2)",
        }
    }

    /// Filename-safe token.
    pub fn token(self) -> &'static str {
        match self {
            Self::Iid => "iid",
            Self::Het05 => "syn0.5-0.5",
            Self::Het1 => "syn1-1",
            Self::Het2 => "syn2-2",
        }
    }

    pub fn synthetic(self) -> SyntheticConfig {
        match self {
            Self::Iid => SyntheticConfig::iid(0),
            Self::Het05 => SyntheticConfig::non_iid(0.5, 0.5, 0),
            Self::Het1 => SyntheticConfig::non_iid(1.0, 1.0, 0),
            Self::Het2 => SyntheticConfig::non_iid(2.0, 2.0, 0),
        }
    }
}

impl FromStr for DatasetPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect::<String>()
            .to_lowercase();
        let compact = compact.strip_prefix("synthetic").unwrap_or(&compact);
        DatasetPreset::ALL
            .into_iter()
            .find(|p| compact == p.label() || compact == p.token() || compact == format!("({})", p.label()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown dataset '{s}' (expected iid, (0.5,0.5), (1,1), (2,2) or a [dataset] table)"
                ))
            })
    }
}

/// Either a named preset or a full generator table.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(into = "DatasetRepr")]
pub enum DatasetSpec {
    Preset(DatasetPreset),
    /// `seed` inside the table is ignored; the run's `data_seed` (or `seed`) applies.
    Custom(SyntheticConfig),
}

#[derive(Serialize)]
#[serde(untagged)]
enum DatasetRepr {
    Name(String),
    Table(SyntheticConfig),
}

// Dispatching by hand (rather than through an untagged enum) keeps errors from
// inside the table, such as a misspelled key, intact.
impl<'de> Deserialize<'de> for DatasetSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = DatasetSpec;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a dataset name or a [dataset] table")
            }

            fn visit_str<E: serde::de::Error>(self, s: &str) -> std::result::Result<DatasetSpec, E> {
                s.parse().map(DatasetSpec::Preset).map_err(E::custom)
            }

            fn visit_map<A: serde::de::MapAccess<'de>>(self, map: A) -> std::result::Result<DatasetSpec, A::Error> {
                SyntheticConfig::deserialize(serde::de::value::MapAccessDeserializer::new(map)).map(DatasetSpec::Custom)
            }
        }
        d.deserialize_any(V)
    }
}

impl From<DatasetSpec> for DatasetRepr {
    fn from(d: DatasetSpec) -> Self {
        match d {
            DatasetSpec::Preset(p) => DatasetRepr::Name(p.label().to_string()),
            DatasetSpec::Custom(t) => DatasetRepr::Table(t),
        }
    }
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Preset(DatasetPreset::Het05)
    }
}

impl DatasetSpec {
    pub fn token(&self) -> String {
        match self {
            DatasetSpec::Preset(p) => p.token().to_string(),
            DatasetSpec::Custom(c) if c.iid => "iid-custom".to_string(),
            DatasetSpec::Custom(c) => format!("syn{}-{}", c.alpha, c.beta),
        }
    }

    pub fn resolve(&self, seed: u64) -> SyntheticConfig {
        let mut cfg = match self {
            DatasetSpec::Preset(p) => p.synthetic(),
            DatasetSpec::Custom(c) => c.clone(),
        };
        cfg.seed = seed;
        cfg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `logistic` or `mlp`.
    pub kind: ModelKindName,
    /// Hidden units of the perceptron; ignored for logistic regression.
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKindName {
    #[default]
    Logistic,
    Mlp,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKindName::Logistic,
            hidden: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QfflHyper {
    pub q: f64,
    /// Defaults to `1 / train.learning_rate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
}

impl Default for QfflHyper {
    fn default() -> Self {
        QfflHyper {
            q: 1.0,
            lipschitz: None,
        }
    }
}

/// One simulated training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    /// Admit every client and zero-fill + compensate lossy uploads.
    pub tra: bool,
    pub dataset: DatasetSpec,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub eligible_ratio: f64,
    pub loss_ratio: f64,
    /// Drives everything that happens during rounds, packet loss included.
    pub seed: u64,
    /// Drives data generation and network profiles; defaults to `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    pub packet_size: usize,
    pub compensation: CompensationMode,
    pub compensation_form: CompensationForm,
    /// Speed threshold separating sufficient from insufficient clients, for the
    /// simulated round-time metric.
    pub speed_threshold_mbps: f64,
    pub model: ModelSection,
    pub train: TrainHyper,
    pub qffl: QfflHyper,
    pub pfedme: PfedmeHyper,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algorithm: Algorithm::FedAvg,
            tra: false,
            dataset: DatasetSpec::default(),
            rounds: 200,
            clients_per_round: 10,
            eligible_ratio: 1.0,
            loss_ratio: 0.0,
            seed: 0,
            data_seed: None,
            packet_size: 256,
            compensation: CompensationMode::Nominal,
            compensation_form: CompensationForm::Corrected,
            speed_threshold_mbps: 2.0,
            model: ModelSection::default(),
            train: TrainHyper::default(),
            qffl: QfflHyper::default(),
            pfedme: PfedmeHyper::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn variant(&self) -> Variant {
        Variant {
            algorithm: self.algorithm,
            tra: self.tra,
        }
    }

    pub fn set_variant(&mut self, v: Variant) {
        self.algorithm = v.algorithm;
        self.tra = v.tra;
    }

    pub fn policy(&self) -> SelectionPolicy {
        if self.tra {
            SelectionPolicy::TraFull
        } else {
            SelectionPolicy::ThresholdBiased
        }
    }

    pub fn population_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        self.dataset.resolve(self.population_seed())
    }

    pub fn model_spec(&self) -> ModelSpec {
        let data = self.synthetic();
        let kind = match self.model.kind {
            ModelKindName::Logistic => ModelKind::Logistic,
            ModelKindName::Mlp => ModelKind::Mlp {
                hidden: self.model.hidden,
            },
        };
        ModelSpec {
            features: data.features,
            classes: data.classes,
            kind,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        self.qffl.lipschitz.unwrap_or(1.0 / self.train.learning_rate)
    }

    /// `<algo>_<dataset>_e<ratio>_r<loss>`
    pub fn file_stem(&self) -> String {
        format!(
            "{}_{}_e{}_r{}",
            self.variant(),
            self.dataset.token(),
            self.eligible_ratio,
            self.loss_ratio
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let data = self.synthetic();
        data.validate()?;
        self.model_spec().validate()?;
        self.train.validate()?;
        if self.algorithm == Algorithm::QFedAvg && self.qffl.lipschitz.is_none() && self.train.learning_rate == 0.0 {
            return bad("q-FedAvg with train.learning_rate = 0 needs an explicit qffl.lipschitz".into());
        }
        if !(self.eligible_ratio > 0.0 && self.eligible_ratio <= 1.0) {
            return bad(format!("eligible_ratio {} outside (0, 1]", self.eligible_ratio));
        }
        if !(0.0..1.0).contains(&self.loss_ratio) {
            return bad(format!("loss_ratio {} outside [0, 1)", self.loss_ratio));
        }
        if self.clients_per_round < 1 || self.clients_per_round > data.num_clients {
            return bad(format!(
                "clients_per_round {} must lie in [1, num_clients = {}]",
                self.clients_per_round, data.num_clients
            ));
        }
        if !self.tra && insufficient_count(data.num_clients, self.eligible_ratio) >= data.num_clients {
            return bad("threshold-biased selection needs at least one sufficient client".into());
        }
        if self.packet_size < 1 {
            return bad("packet_size must be >= 1".into());
        }
        if !(self.speed_threshold_mbps > 0.0 && self.speed_threshold_mbps.is_finite()) {
            return bad("speed_threshold_mbps must be positive".into());
        }
        if !(self.qffl.q >= 0.0 && self.qffl.q.is_finite()) {
            return bad("qffl.q must be finite and >= 0".into());
        }
        if self.qffl.lipschitz.is_some_and(|l| !(l > 0.0 && l.is_finite())) {
            return bad("qffl.lipschitz must be positive".into());
        }
        if self.algorithm == Algorithm::PFedMe {
            self.pfedme.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_config(path)?).map_err(|e| prefix_path(path, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serialises")
    }
}

/// Axes of a scenario matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub variants: Vec<Variant>,
    pub datasets: Vec<DatasetSpec>,
    pub eligible_ratios: Vec<f64>,
    pub loss_ratios: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    /// Master seed; every cell derives its own seeds from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub base: ExperimentConfig,
    pub grid: GridAxes,
}

fn one() -> usize {
    1
}

impl MatrixConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: MatrixConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_config(path)?).map_err(|e| prefix_path(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        for (name, len) in [
            ("variants", g.variants.len()),
            ("datasets", g.datasets.len()),
            ("eligible_ratios", g.eligible_ratios.len()),
            ("loss_ratios", g.loss_ratios.len()),
        ] {
            if len == 0 {
                return Err(Error::Config(format!("grid.{name} is empty")));
            }
        }
        if self.replicates < 1 {
            return Err(Error::Config("replicates must be >= 1".into()));
        }
        for cell in self.cells() {
            cell.config
                .validate()
                .map_err(|e| Error::Config(format!("cell {}: {e}", cell.name)))?;
        }
        Ok(())
    }

    /// The Cartesian product of the axes, in a fixed order.
    pub fn cells(&self) -> Vec<Cell> {
        let g = &self.grid;
        let mut cells = Vec::new();
        for &variant in &g.variants {
            for dataset in &g.datasets {
                for &eligible in &g.eligible_ratios {
                    for &loss in &g.loss_ratios {
                        for rep in 0..self.replicates {
                            let mut cfg = self.base.clone();
                            cfg.set_variant(variant);
                            cfg.dataset = dataset.clone();
                            cfg.eligible_ratio = eligible;
                            cfg.loss_ratio = loss;
                            let mut name = cfg.file_stem();
                            if self.replicates > 1 {
                                name.push_str(&format!("_s{rep}"));
                            }
                            cfg.seed = crate::rng::derive_seed(self.seed, &format!("cell/{name}"));
                            cfg.data_seed = Some(crate::rng::derive_seed(
                                self.seed,
                                &format!("data/{}/{rep}", dataset.token()),
                            ));
                            cells.push(Cell {
                                index: cells.len(),
                                name,
                                replicate: rep,
                                config: cfg,
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

/// One fully resolved run of a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    /// File stem of the cell's outputs.
    pub name: String,
    pub replicate: usize,
    pub config: ExperimentConfig,
}

fn read_config(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn prefix_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names() {
        let v: Variant = "tra-qfedavg".parse().unwrap();
        assert_eq!(
            v,
            Variant {
                algorithm: Algorithm::QFedAvg,
                tra: true
            }
        );
        let b: Variant = "qfedavg-biased".parse().unwrap();
        assert_eq!(b.to_string(), "qfedavg");
        assert!("sgd".parse::<Variant>().is_err());
    }

    #[test]
    fn dataset_names() {
        for (s, p) in [
            ("iid", DatasetPreset::Iid),
            ("(0.5,0.5)", DatasetPreset::Het05),
            ("Synthetic(1,1)", DatasetPreset::Het1),
            ("(2, 2)", DatasetPreset::Het2),
            ("syn1-1", DatasetPreset::Het1),
        ] {
            assert_eq!(s.parse::<DatasetPreset>().unwrap(), p, "{s}");
        }
        assert!("(3,3)".parse::<DatasetPreset>().is_err());
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("algorithm = \"qfedavg\"\ntra = true\nloss_ratio = 0.1\n").unwrap();
        assert_eq!(cfg.rounds, 200);
        assert_eq!(cfg.clients_per_round, 10);
        assert_eq!(cfg.model_spec().dim(), 610);
        assert_eq!(cfg.lipschitz(), 10.0);
        assert_eq!(cfg.file_stem(), "tra-qfedavg_syn0.5-0.5_e1_r0.1");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml("algoritm = \"fedavg\"\n").unwrap_err();
        assert!(err.is_config());
        let err = ExperimentConfig::from_toml("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "eligible_ratio = 0.0",
            "loss_ratio = 1.0",
            "clients_per_round = 101",
            "clients_per_round = 0",
            "[train]\nlocal_epochs = 0",
            "packet_size = 0",
            "dataset = \"(9,9)\"",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn custom_dataset_table() {
        let cfg = ExperimentConfig::from_toml("[dataset]\nalpha = 0.25\nbeta = 0.75\nnum_clients = 20\n").unwrap();
        let syn = cfg.synthetic();
        assert_eq!((syn.alpha, syn.beta, syn.num_clients), (0.25, 0.75, 20));
        assert_eq!(cfg.dataset.token(), "syn0.25-0.75");
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::from_toml("algorithm = \"pfedme\"\ndataset = \"(1,1)\"\n").unwrap();
        cfg.data_seed = Some(99);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    fn grid(text: &str) -> Result<MatrixConfig> {
        MatrixConfig::from_toml(text)
    }

    #[test]
    fn matrix_cells() {
        let m = grid(
            "seed = 3\n[grid]\nvariants = [\"tra-qfedavg\"]\ndatasets = [\"(1,1)\"]\neligible_ratios = [0.7, 0.8, 0.9]\nloss_ratios = [0.1, 0.3, 0.5]\n",
        )
        .unwrap();
        let cells = m.cells();
        assert_eq!(cells.len(), 9);
        let mut seeds: Vec<u64> = cells.iter().map(|c| c.config.seed).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 9);
        assert_eq!(cells, m.cells());
        assert_eq!(cells[0].name, "tra-qfedavg_syn1-1_e0.7_r0.1");
        // one population per dataset and replicate
        assert!(cells.iter().all(|c| c.config.data_seed == cells[0].config.data_seed));
    }

    #[test]
    fn empty_axis_rejected() {
        let err = grid("[grid]\nvariants = []\ndatasets = [\"iid\"]\neligible_ratios = [1.0]\nloss_ratios = [0.0]\n")
            .unwrap_err();
        assert!(err.to_string().contains("variants"));
    }
}
