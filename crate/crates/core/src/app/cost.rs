//! Per-stage cost model used to charge simulated (or busy-waited) time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::util::mix64;

/// Duration distribution of one stage: lognormal with the given mean and
/// standard deviation, in seconds. `sd_s == 0` is a constant.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostDist {
    pub mean_s: f64,
    #[serde(default)]
    pub sd_s: f64,
}

impl CostDist {
    pub const ZERO: CostDist = CostDist {
        mean_s: 0.0,
        sd_s: 0.0,
    };

    pub fn constant(mean_s: f64) -> Self {
        CostDist { mean_s, sd_s: 0.0 }
    }

    pub fn ms(mean_ms: f64, sd_ms: f64) -> Self {
        CostDist {
            mean_s: mean_ms / 1e3,
            sd_s: sd_ms / 1e3,
        }
    }

    /// Samples a duration in seconds from a deterministic stream.
    pub fn sample(&self, stream: u64) -> f64 {
        if self.mean_s <= 0.0 {
            return 0.0;
        }
        if self.sd_s <= 0.0 {
            return self.mean_s;
        }
        let cv2 = (self.sd_s / self.mean_s).powi(2);
        let sigma2 = (1.0 + cv2).ln();
        let mu = self.mean_s.ln() - sigma2 / 2.0;
        let dist = LogNormal::new(mu, sigma2.sqrt()).expect("finite lognormal parameters");
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        dist.sample(&mut rng)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum CostStage {
    Parse,
    Preprocess,
    Compare,
    Postprocess,
}

impl CostStage {
    fn tag(self) -> u64 {
        match self {
            CostStage::Parse => 0x7061_7273,
            CostStage::Preprocess => 0x7072_6570,
            CostStage::Compare => 0x636f_6d70,
            CostStage::Postprocess => 0x706f_7374,
        }
    }
}

/// Mean stage costs plus the byte sizes charged for I/O and transfers.
///
/// `raw_bytes` and `item_bytes` decouple the modelled sizes from the actual
/// payloads, so a run can model 38 MB slots while moving 32-byte buffers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCostModel {
    #[serde(default)]
    pub parse: CostDist,
    #[serde(default)]
    pub preprocess: CostDist,
    #[serde(default)]
    pub compare: CostDist,
    #[serde(default)]
    pub postprocess: CostDist,
    #[serde(default)]
    pub raw_bytes: Option<u64>,
    #[serde(default)]
    pub item_bytes: Option<u64>,
}

impl StageCostModel {
    pub fn dist(&self, stage: CostStage) -> &CostDist {
        match stage {
            CostStage::Parse => &self.parse,
            CostStage::Preprocess => &self.preprocess,
            CostStage::Compare => &self.compare,
            CostStage::Postprocess => &self.postprocess,
        }
    }

    /// Deterministic duration in seconds for a stage applied to key `a`
    /// (or pair `(a, b)`). Independent of event order.
    pub fn sample(&self, stage: CostStage, seed: u64, a: u32, b: u32) -> f64 {
        let stream = mix64(mix64(seed ^ stage.tag()) ^ ((a as u64) << 32 | b as u64));
        self.dist(stage).sample(stream)
    }

    /// Costs of the image forensics workload (regular).
    pub fn forensics() -> Self {
        StageCostModel {
            parse: CostDist::ms(130.8, 14.11),
            preprocess: CostDist::ms(20.5, 0.02),
            compare: CostDist::ms(1.1, 0.01),
            postprocess: CostDist::ZERO,
            raw_bytes: Some(19_400_000_000 / 4980),
            item_bytes: Some(38_100_000),
        }
    }

    /// Costs of the composition-vector workload (irregular).
    pub fn bioinformatics() -> Self {
        StageCostModel {
            parse: CostDist::ms(36.9, 14.79),
            preprocess: CostDist::ms(27.0, 4.90),
            compare: CostDist::ms(2.1, 0.79),
            postprocess: CostDist::ZERO,
            raw_bytes: Some(1_800_000_000 / 2500),
            item_bytes: Some(145_800_000),
        }
    }

    /// Costs of the particle-fusion workload (compute bound, irregular).
    pub fn microscopy() -> Self {
        StageCostModel {
            parse: CostDist::ms(27.4, 1.56),
            preprocess: CostDist::ZERO,
            compare: CostDist::ms(564.3, 348.0),
            postprocess: CostDist::ZERO,
            raw_bytes: Some(150_000_000 / 256),
            item_bytes: Some(6_000),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "forensics" => Some(Self::forensics()),
            "bioinformatics" => Some(Self::bioinformatics()),
            "microscopy" => Some(Self::microscopy()),
            _ => None,
        }
    }
}
