//! Vocabulary predictions from a set of fitted artifacts, shared by the
//! command-line tool and the HTTP service so both give identical answers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::derivative::{predict_nv, GammaFit};
use crate::error::{ensure_positive, Error, Result};
use crate::fertility::FertilityFit;
use crate::isoflops::{predict_allocation, AllocationLaws};
use crate::optim::log_grid;
use crate::parametric::{optimal_v_chars, optimal_v_flops, ParametricLoss};
use crate::scale::{round_vocab, FlopsBudget, ShapeTable};

/// Smallest vocabulary a prediction may report.
pub const MIN_VOCAB: u64 = 1024;

/// Names accepted wherever a preset can be chosen.
pub const PRESETS: [&str; 1] = ["paper-2024"];

/// Character-count ratio to the compute-optimal amount beyond which a run is
/// called under- or overtrained.
pub const REGIME_RATIO: f64 = 2.0;

/// Every fitted quantity a prediction may need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSet {
    pub fertility: FertilityFit,
    pub laws: AllocationLaws,
    pub gamma: GammaFit,
    pub loss: ParametricLoss,
    pub shapes: ShapeTable,
}

impl ArtifactSet {
    pub fn paper_2024() -> Self {
        Self {
            fertility: FertilityFit::paper_2024(),
            laws: AllocationLaws::paper_2024(),
            gamma: GammaFit::paper_2024(),
            loss: ParametricLoss::paper_2024(),
            shapes: ShapeTable::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-2024" => Ok(Self::paper_2024()),
            other => Err(Error::invalid(format!(
                "unknown preset '{other}' (available: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Overlays whichever of `fertility.json`, `laws.json`, `gamma.json`,
    /// `ploss.json` and `shapes.toml` exist in `dir` onto `self`. Returns the
    /// names of the files that were used.
    pub fn overlay_dir(mut self, dir: &Path) -> Result<(Self, Vec<String>)> {
        if !dir.is_dir() {
            return Err(Error::invalid(format!("artifacts directory {} does not exist", dir.display())));
        }
        let mut used = Vec::new();
        let mut take = |name: &str| {
            let p = dir.join(name);
            p.is_file().then(|| {
                used.push(name.to_string());
                p
            })
        };
        if let Some(p) = take("fertility.json") {
            self.fertility = FertilityFit::load(&p)?;
        }
        if let Some(p) = take("laws.json") {
            self.laws = AllocationLaws::load(&p)?;
        }
        if let Some(p) = take("gamma.json") {
            self.gamma = GammaFit::load(&p)?;
        }
        if let Some(p) = take("ploss.json") {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let loss: ParametricLoss = serde_json::from_str(&text)?;
            loss.validate()?;
            self.loss = loss;
        }
        if let Some(p) = take("shapes.toml") {
            self.shapes = ShapeTable::load(&p)?;
        }
        Ok((self, used))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Approach {
    IsoFlops = 1,
    Derivative = 2,
    Parametric = 3,
}

impl TryFrom<u8> for Approach {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Approach::IsoFlops),
            2 => Ok(Approach::Derivative),
            3 => Ok(Approach::Parametric),
            other => Err(Error::invalid(format!("approach must be 1, 2 or 3, got {other}"))),
        }
    }
}

impl From<Approach> for u8 {
    fn from(a: Approach) -> u8 {
        a as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    ComputeOptimal,
    Undertrained,
    Overtrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Constraint {
    /// Optimal for a compute budget.
    Flops,
    /// Optimal at a fixed amount of training characters.
    Chars,
    /// Scaled from model size alone.
    Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRequest {
    pub approach: Approach,
    #[serde(default)]
    pub n_nv: Option<f64>,
    #[serde(default)]
    pub flops: Option<f64>,
    #[serde(default)]
    pub chars: Option<f64>,
    #[serde(default)]
    pub embed_dim: Option<u32>,
}

impl PredictionRequest {
    /// Approach 1 needs a budget, approach 2 a model size, approach 3 a model
    /// size and exactly one of budget or characters. Characters are only
    /// meaningful for approach 3.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n_nv", self.n_nv), ("flops", self.flops), ("chars", self.chars)] {
            if let Some(v) = v {
                ensure_positive(name, v)?;
            }
        }
        if self.embed_dim == Some(0) {
            return Err(Error::invalid("embed_dim must be positive"));
        }
        match self.approach {
            Approach::IsoFlops => {
                if self.flops.is_none() {
                    return Err(Error::invalid("approach 1 requires flops"));
                }
                if self.chars.is_some() {
                    return Err(Error::invalid("approach 1 does not take chars"));
                }
            }
            Approach::Derivative => {
                if self.n_nv.is_none() {
                    return Err(Error::invalid("approach 2 requires n_nv"));
                }
                if self.chars.is_some() {
                    return Err(Error::invalid("approach 2 does not take chars"));
                }
            }
            Approach::Parametric => {
                if self.n_nv.is_none() {
                    return Err(Error::invalid("approach 3 requires n_nv"));
                }
                if self.flops.is_some() == self.chars.is_some() {
                    return Err(Error::invalid("approach 3 requires exactly one of flops or chars"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocabPrediction {
    pub vocab_size: u64,
    pub n_v: f64,
    pub embed_dim: u32,
    pub n_nv: f64,
    pub approach: Approach,
    pub mode: Regime,
    pub constraint: Constraint,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_u: Option<f64>,
    /// The optimum hit a search-window edge or the minimum vocabulary.
    pub boundary: bool,
    pub request: PredictionRequest,
}

fn width(art: &ArtifactSet, n_nv: f64, over: Option<u32>) -> Result<u32> {
    match over {
        Some(d) => Ok(d),
        None => art.shapes.embed_dim_for(n_nv),
    }
}

fn finish(vocab: f64) -> (u64, bool) {
    let rounded = round_vocab(vocab);
    if rounded < MIN_VOCAB {
        (MIN_VOCAB, true)
    } else {
        (rounded, false)
    }
}

/// Classifies a character count against the compute-optimal amount the
/// allocation laws give for the same model size.
pub fn classify_regime(laws: &AllocationLaws, n_nv: f64, chars: f64) -> Regime {
    if laws.nv.alpha <= 0.0 {
        return Regime::ComputeOptimal;
    }
    let c = (n_nv / laws.nv.k).powf(1.0 / laws.nv.alpha);
    let optimal = laws.h.eval(c);
    let ratio = chars / optimal;
    if ratio < 1.0 / REGIME_RATIO {
        Regime::Undertrained
    } else if ratio > REGIME_RATIO {
        Regime::Overtrained
    } else {
        Regime::ComputeOptimal
    }
}

pub fn predict(req: &PredictionRequest, art: &ArtifactSet) -> Result<VocabPrediction> {
    req.validate()?;
    match req.approach {
        Approach::IsoFlops => {
            let budget = FlopsBudget::new(req.flops.unwrap())?;
            let alloc = predict_allocation(&art.laws, budget, &art.shapes, req.embed_dim)?;
            let (vocab_size, boundary) = finish(alloc.n_v / alloc.embed_dim as f64);
            Ok(VocabPrediction {
                vocab_size,
                n_v: alloc.n_v,
                embed_dim: alloc.embed_dim,
                n_nv: alloc.n_nv,
                approach: req.approach,
                mode: Regime::ComputeOptimal,
                constraint: Constraint::Flops,
                loss_u: None,
                boundary,
                request: *req,
            })
        }
        Approach::Derivative => {
            let n_nv = req.n_nv.unwrap();
            let p = predict_nv(&art.gamma, n_nv, &art.shapes, req.embed_dim)?;
            let (vocab_size, boundary) = finish(p.n_v / p.embed_dim as f64);
            Ok(VocabPrediction {
                vocab_size,
                n_v: p.n_v,
                embed_dim: p.embed_dim,
                n_nv,
                approach: req.approach,
                mode: Regime::ComputeOptimal,
                constraint: Constraint::Params,
                loss_u: None,
                boundary,
                request: *req,
            })
        }
        Approach::Parametric => {
            let n_nv = req.n_nv.unwrap();
            let d = width(art, n_nv, req.embed_dim)?;
            let df = d as f64;
            let (sol, loss_u, mode, constraint) = match (req.flops, req.chars) {
                (Some(c), None) => {
                    let sol = optimal_v_flops(&art.loss, n_nv, df, FlopsBudget::new(c)?)?;
                    let loss = art.loss.loss_at_budget(n_nv, sol.vocab, df, c);
                    (sol, loss, Regime::ComputeOptimal, Constraint::Flops)
                }
                (None, Some(h)) => {
                    let sol = optimal_v_chars(&art.loss, n_nv, df, h, &art.fertility)?;
                    let loss = art.loss.eval(n_nv, sol.vocab, df, h, &art.fertility);
                    (sol, loss, classify_regime(&art.laws, n_nv, h), Constraint::Chars)
                }
                _ => unreachable!("validated above"),
            };
            let (vocab_size, clamped) = finish(sol.vocab);
            Ok(VocabPrediction {
                vocab_size,
                n_v: sol.vocab * df,
                embed_dim: d,
                n_nv,
                approach: req.approach,
                mode,
                constraint,
                loss_u: Some(loss_u),
                boundary: sol.boundary || clamped,
                request: *req,
            })
        }
    }
}

/// One point of a loss-versus-vocabulary curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub vocab: f64,
    pub loss_u: f64,
}

/// Largest number of points a curve request may ask for.
pub const MAX_CURVE_POINTS: usize = 10_000;

/// `points` log-spaced vocabulary sizes on `[vmin, vmax]` with the loss at a
/// fixed budget, where the token count absorbs the vocabulary parameters.
pub fn loss_curve(
    loss: &ParametricLoss,
    n_nv: f64,
    d: f64,
    budget: FlopsBudget,
    vmin: f64,
    vmax: f64,
    points: usize,
) -> Result<Vec<CurvePoint>> {
    ensure_positive("n_nv", n_nv)?;
    ensure_positive("embedding width", d)?;
    ensure_positive("vmin", vmin)?;
    ensure_positive("vmax", vmax)?;
    if !(1..=MAX_CURVE_POINTS).contains(&points) {
        return Err(Error::invalid(format!("points must be between 1 and {MAX_CURVE_POINTS}")));
    }
    if vmax < vmin || (points > 1 && vmax == vmin) {
        return Err(Error::invalid("vmax must exceed vmin"));
    }
    Ok(log_grid(vmin, vmax, points)
        .into_iter()
        .map(|v| CurvePoint {
            vocab: v,
            loss_u: loss.loss_at_budget(n_nv, v, d, budget.value()),
        })
        .collect())
}

/// A published row of predicted optima.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedRow {
    pub n_nv: f64,
    pub embed_dim: u32,
    pub flops: f64,
    /// `N_v` in parameters per approach.
    pub n_v: [f64; 3],
    /// Vocabulary size per approach.
    pub vocab: [f64; 3],
}

const fn row(n_nv: f64, embed_dim: u32, flops: f64, n_v: [f64; 3], vocab: [f64; 3]) -> PublishedRow {
    PublishedRow {
        n_nv,
        embed_dim,
        flops,
        n_v,
        vocab,
    }
}

/// Reference predictions for seven model sizes, 3B to 300B.
pub const PUBLISHED_TABLE: [PublishedRow; 7] = [
    row(3e9, 3200, 1.3e21, [0.1e9, 0.1e9, 0.1e9], [39e3, 43e3, 37e3]),
    row(7e9, 4096, 7.1e21, [0.3e9, 0.3e9, 0.2e9], [62e3, 67e3, 60e3]),
    row(13e9, 5120, 2.4e22, [0.4e9, 0.5e9, 0.4e9], [83e3, 91e3, 81e3]),
    row(30e9, 6048, 1.3e23, [0.9e9, 0.9e9, 0.9e9], [142e3, 154e3, 142e3]),
    row(70e9, 8192, 7.1e23, [1.7e9, 1.9e9, 1.8e9], [212e3, 231e3, 218e3]),
    row(130e9, 12888, 2.4e24, [2.9e9, 3.2e9, 3.0e9], [237e3, 258e3, 248e3]),
    row(300e9, 16384, 1.3e25, [5.8e9, 6.4e9, 6.3e9], [356e3, 389e3, 383e3]),
];

/// Computed counterpart of a [`PublishedRow`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReproducedRow {
    pub published: PublishedRow,
    pub n_v: [f64; 3],
    pub vocab: [u64; 3],
    /// `computed / published - 1` for each vocabulary cell.
    pub vocab_rel_err: [f64; 3],
    pub n_v_rel_err: [f64; 3],
}

/// Recomputes every published row with `art`, at the row's own width.
pub fn reproduce_table(art: &ArtifactSet) -> Result<Vec<ReproducedRow>> {
    PUBLISHED_TABLE
        .iter()
        .map(|row| {
            let mut n_v = [0.0; 3];
            let mut vocab = [0u64; 3];
            let reqs = [
                PredictionRequest {
                    approach: Approach::IsoFlops,
                    n_nv: Some(row.n_nv),
                    flops: Some(row.flops),
                    chars: None,
                    embed_dim: Some(row.embed_dim),
                },
                PredictionRequest {
                    approach: Approach::Derivative,
                    n_nv: Some(row.n_nv),
                    flops: None,
                    chars: None,
                    embed_dim: Some(row.embed_dim),
                },
                PredictionRequest {
                    approach: Approach::Parametric,
                    n_nv: Some(row.n_nv),
                    flops: Some(row.flops),
                    chars: None,
                    embed_dim: Some(row.embed_dim),
                },
            ];
            for (i, req) in reqs.iter().enumerate() {
                let p = predict(req, art)?;
                n_v[i] = p.n_v;
                vocab[i] = p.vocab_size;
            }
            let rel = |a: f64, b: f64| a / b - 1.0;
            Ok(ReproducedRow {
                published: *row,
                n_v,
                vocab,
                vocab_rel_err: [0, 1, 2].map(|i| rel(vocab[i] as f64, row.vocab[i])),
                n_v_rel_err: [0, 1, 2].map(|i| rel(n_v[i], row.n_v[i])),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(approach: Approach, n_nv: Option<f64>, flops: Option<f64>, chars: Option<f64>) -> PredictionRequest {
        PredictionRequest {
            approach,
            n_nv,
            flops,
            chars,
            embed_dim: None,
        }
    }

    #[test]
    fn request_validation() {
        use Approach::*;
        assert!(req(IsoFlops, None, Some(1e21), None).validate().is_ok());
        assert!(req(IsoFlops, Some(3e9), None, None).validate().is_err());
        assert!(req(IsoFlops, None, Some(1e21), Some(1e9)).validate().is_err());
        assert!(req(Derivative, Some(3e9), None, None).validate().is_ok());
        assert!(req(Derivative, None, Some(1e21), None).validate().is_err());
        assert!(req(Parametric, Some(3e9), Some(1e21), Some(1e9)).validate().is_err());
        assert!(req(Parametric, Some(3e9), None, None).validate().is_err());
        assert!(req(Parametric, Some(3e9), None, Some(1e11)).validate().is_ok());
        assert!(req(Parametric, Some(-3e9), Some(1e21), None).validate().is_err());
    }

    #[test]
    fn approach_json_is_numeric() {
        assert_eq!(serde_json::to_string(&Approach::Derivative).unwrap(), "2");
        assert!(serde_json::from_str::<Approach>("4").is_err());
        let r: PredictionRequest = serde_json::from_str(r#"{"approach":3,"n_nv":3e9,"flops":1.3e21}"#).unwrap();
        assert_eq!(r.approach, Approach::Parametric);
    }

    #[test]
    fn predictions_for_the_3b_row() {
        let art = ArtifactSet::paper_2024();
        let p = predict(&req(Approach::Parametric, Some(3e9), Some(1.3e21), None), &art).unwrap();
        assert!((p.vocab_size as f64 / 37e3 - 1.0).abs() < 0.05, "{p:?}");
        assert_eq!(p.embed_dim, 3200);
        assert_eq!(p.vocab_size % 128, 0);
        assert!(p.loss_u.unwrap() > -art.loss.e);
        let p = predict(&req(Approach::Derivative, Some(7e9), None, None), &art).unwrap();
        assert!((p.vocab_size as f64 / 67e3 - 1.0).abs() < 0.05, "{p:?}");
        let p = predict(&req(Approach::IsoFlops, None, Some(1.3e21), None), &art).unwrap();
        assert!((p.n_nv / 3e9 - 1.0).abs() < 0.05);
    }

    #[test]
    fn minimum_vocabulary_is_enforced() {
        let art = ArtifactSet::paper_2024();
        let p = predict(&req(Approach::Derivative, Some(1e6), None, None), &art).unwrap();
        assert_eq!(p.vocab_size, MIN_VOCAB);
        assert!(p.boundary);
    }

    #[test]
    fn regimes() {
        let laws = AllocationLaws::paper_2024();
        let c = (302e6f64 / 0.08).powf(2.0);
        let h_opt = laws.h.eval(c);
        assert_eq!(classify_regime(&laws, 302e6, h_opt), Regime::ComputeOptimal);
        assert_eq!(classify_regime(&laws, 302e6, h_opt * 10.0), Regime::Overtrained);
        assert_eq!(classify_regime(&laws, 302e6, h_opt / 10.0), Regime::Undertrained);
    }

    #[test]
    fn curve_endpoints_and_validation() {
        let p = ParametricLoss::paper_2024();
        let b = FlopsBudget::new(1e20).unwrap();
        let c = loss_curve(&p, 302e6, 1024.0, b, 4096.0, 65536.0, 2).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].vocab, 4096.0);
        assert_eq!(c[1].vocab, 65536.0);
        assert_eq!(c[0].loss_u, p.loss_at_budget(302e6, 4096.0, 1024.0, 1e20));
        assert_eq!(c[1].loss_u, p.loss_at_budget(302e6, 65536.0, 1024.0, 1e20));
        assert_eq!(loss_curve(&p, 302e6, 1024.0, b, 4096.0, 4096.0, 1).unwrap().len(), 1);
        assert!(loss_curve(&p, 302e6, 1024.0, b, 8192.0, 4096.0, 10).is_err());
        assert!(loss_curve(&p, 302e6, 1024.0, b, 4096.0, 8192.0, 0).is_err());
    }

    #[test]
    fn unknown_preset() {
        assert!(ArtifactSet::preset("paper-2024").is_ok());
        assert!(ArtifactSet::preset("nope").is_err());
    }

    #[test]
    fn artifact_directory_overlay() {
        let dir = tempfile::tempdir().unwrap();
        let gamma = GammaFit {
            gamma: 0.5,
            anchor_n_nv: 1e8,
            anchor_n_v: 1e7,
        };
        std::fs::write(dir.path().join("gamma.json"), serde_json::to_string(&gamma).unwrap()).unwrap();
        let (art, used) = ArtifactSet::paper_2024().overlay_dir(dir.path()).unwrap();
        assert_eq!(used, vec!["gamma.json".to_string()]);
        assert_eq!(art.gamma, gamma);
        assert_eq!(art.loss, ParametricLoss::paper_2024());
        assert!(ArtifactSet::paper_2024().overlay_dir(&dir.path().join("missing")).is_err());
    }
}
