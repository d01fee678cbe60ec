//! Scenario files: which problem to generate, how to solve it and where to write.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use serde::{Deserialize, Deserializer};
use streamopt::blocktridiag::Depth;
use streamopt::testbeds::lot::LotConfig;
use streamopt::testbeds::nhpp::SplineNhppConfig;
use streamopt::testbeds::synthetic::SyntheticLsConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    /// Random least-squares stream.
    SyntheticLs,
    /// Level-crossing samples reconstructed in a lapped cosine basis.
    LotLs,
    /// Poisson intensity estimation with the online Newton solver.
    NhppNoa,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::SyntheticLs => "synthetic-ls",
            Kind::LotLs => "lot-ls",
            Kind::NhppNoa => "nhpp-noa",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `full` or a positive frame count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Buffer {
    Full,
    Frames(usize),
}

impl Buffer {
    pub fn depth(self) -> Depth {
        match self {
            Buffer::Full => Depth::Full,
            Buffer::Frames(b) => Depth::Frames(b),
        }
    }
}

impl fmt::Display for Buffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Buffer::Full => f.write_str("full"),
            Buffer::Frames(b) => write!(f, "{b}"),
        }
    }
}

impl FromStr for Buffer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Buffer::Full);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("buffer must be at least 1".into()),
            Ok(b) => Ok(Buffer::Frames(b)),
            Err(_) => Err(format!("expected `full` or a positive integer, got `{s}`")),
        }
    }
}

impl<'de> Deserialize<'de> for Buffer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(usize),
            Text(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Int(b) => b.to_string(),
            Raw::Text(s) => s,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n: usize,
    pub m: usize,
    pub frames: usize,
    pub coupling: f64,
    pub sv_range: (f64, f64),
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            n: 4,
            m: 12,
            frames: 20,
            coupling: 0.1,
            sv_range: (0.9, 1.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub kind: Kind,
    pub seeds: Vec<u64>,
    pub buffer: Buffer,
    /// Tikhonov weight; defaults to 0.1 (synthetic) or the level-crossing config's value.
    pub gamma: Option<f64>,
    /// Newton stopping tolerance on the squared gradient norm.
    pub eps0: f64,
    pub out: PathBuf,
    pub buffer_sweep: Vec<usize>,
    pub synthetic: SyntheticSection,
    pub lot: LotConfig,
    pub nhpp: SplineNhppConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            kind: Kind::SyntheticLs,
            seeds: vec![0],
            buffer: Buffer::Full,
            gamma: None,
            eps0: 1e-16,
            out: PathBuf::from("streamopt-out"),
            buffer_sweep: Vec::new(),
            synthetic: SyntheticSection::default(),
            lot: LotConfig::default(),
            nhpp: SplineNhppConfig::default(),
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let sc: Scenario = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("scenario lists no seeds");
        }
        if !(self.eps0 > 0.0) {
            bail!("eps0 must be positive");
        }
        if self.gamma.is_some_and(|g| !(g >= 0.0)) {
            bail!("gamma must be nonnegative");
        }
        if self.buffer_sweep.contains(&0) {
            bail!("buffer sizes must be at least 1");
        }
        let s = &self.synthetic;
        if s.n == 0 || s.m == 0 || !(s.sv_range.0 > 0.0 && s.sv_range.0 <= s.sv_range.1) || !(s.coupling >= 0.0) {
            bail!("invalid synthetic section");
        }
        Ok(())
    }

    /// Frame count of the selected problem.
    pub fn frames(&self) -> usize {
        match self.kind {
            Kind::SyntheticLs => self.synthetic.frames,
            Kind::LotLs => self.lot.frames,
            Kind::NhppNoa => self.nhpp.frames,
        }
    }

    pub fn set_frames(&mut self, frames: usize) {
        match self.kind {
            Kind::SyntheticLs => self.synthetic.frames = frames,
            Kind::LotLs => self.lot.frames = frames,
            Kind::NhppNoa => self.nhpp.frames = frames,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self.kind {
            Kind::LotLs => self.gamma.unwrap_or(self.lot.gamma),
            _ => self.gamma.unwrap_or(0.1),
        }
    }

    pub fn synthetic_config(&self) -> SyntheticLsConfig {
        let s = &self.synthetic;
        SyntheticLsConfig {
            n: s.n,
            m: s.m,
            frames: s.frames,
            gamma: self.gamma(),
            coupling: s.coupling,
            sv_range: s.sv_range,
        }
    }

    pub fn lot_config(&self, seed: u64) -> LotConfig {
        LotConfig {
            signal_seed: seed,
            gamma: self.gamma(),
            ..self.lot.clone()
        }
    }

    pub fn nhpp_config(&self, seed: u64) -> SplineNhppConfig {
        SplineNhppConfig {
            rate_seed: seed,
            event_seed: seed,
            ..self.nhpp.clone()
        }
    }

    /// Output directory of one seed.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("{}-seed{seed}", self.kind))
    }
}
