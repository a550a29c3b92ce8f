//! Random-effect design construction for the three covariance scenarios
//! (high-cardinality categorical, longitudinal, spatial) and their
//! spatial-categorical combination.

mod kernel;
mod matnorm;
mod sparse;

pub use kernel::{rbf_kernel, spatial_posterior_chol};
pub use matnorm::sample_matrix_normal;
pub use sparse::{build_categorical_z, build_longitudinal_z, SparseIndicator};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Per-row design of one random-effect term: each observation points to a
/// level (cluster, subject or location) with a multiplicative weight
/// (1 for indicators, `t^k` for longitudinal polynomial terms). `None`
/// marks levels outside the training universe.
#[derive(Debug, Clone)]
pub struct TermDesign {
    pub cardinality: usize,
    pub levels: Vec<Option<usize>>,
    pub weights: Vec<f64>,
}

/// Scenario metadata: which random-effect structure the data carries and
/// the per-row values needed to build its design matrix.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum REScenario {
    /// One or more categorical features with the given cardinalities.
    Categorical {
        cardinalities: Vec<usize>,
        level_ids: Vec<Vec<Option<usize>>>,
    },
    /// `q` subjects measured through time with `poly_terms` polynomial
    /// random-effect terms (intercept, slope, ...).
    Longitudinal {
        subjects: usize,
        poly_terms: usize,
        subject_ids: Vec<Option<usize>>,
        times: Vec<f64>,
    },
    /// Observations grouped by `q` 2-D locations.
    Spatial {
        locations: Matrix,
        location_ids: Vec<Option<usize>>,
    },
    /// A spatial term plus categorical terms, horizontally stacked.
    SpatialCategorical {
        locations: Matrix,
        location_ids: Vec<Option<usize>>,
        cardinalities: Vec<usize>,
        level_ids: Vec<Vec<Option<usize>>>,
    },
}

impl REScenario {
    pub fn n_rows(&self) -> usize {
        match self {
            REScenario::Categorical { level_ids, .. } => level_ids[0].len(),
            REScenario::Longitudinal { subject_ids, .. } => subject_ids.len(),
            REScenario::Spatial { location_ids, .. } => location_ids.len(),
            REScenario::SpatialCategorical { location_ids, .. } => location_ids.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_ids = |ids: &[Option<usize>], q: usize, what: &str| -> Result<()> {
            if q == 0 {
                return Err(Error::InvalidArgument(format!(
                    "{what} cardinality must be >= 1"
                )));
            }
            for id in ids.iter().flatten() {
                if *id >= q {
                    return Err(Error::InvalidArgument(format!(
                        "{what} id {id} out of range (cardinality {q})"
                    )));
                }
            }
            Ok(())
        };
        match self {
            REScenario::Categorical {
                cardinalities,
                level_ids,
            } => {
                if cardinalities.len() != level_ids.len() || cardinalities.is_empty() {
                    return Err(Error::Shape("one id vector per categorical feature".into()));
                }
                for (ids, &q) in level_ids.iter().zip(cardinalities) {
                    if ids.len() != level_ids[0].len() {
                        return Err(Error::Shape("id vectors must share length".into()));
                    }
                    check_ids(ids, q, "level")?;
                }
                Ok(())
            }
            REScenario::Longitudinal {
                subjects,
                poly_terms,
                subject_ids,
                times,
            } => {
                if *poly_terms == 0 {
                    return Err(Error::InvalidArgument("poly_terms must be >= 1".into()));
                }
                if subject_ids.len() != times.len() {
                    return Err(Error::Shape(
                        "subject ids and times must share length".into(),
                    ));
                }
                if times.iter().any(|t| !t.is_finite()) {
                    return Err(Error::InvalidArgument("times must be finite".into()));
                }
                check_ids(subject_ids, *subjects, "subject")
            }
            REScenario::Spatial {
                locations,
                location_ids,
            } => check_ids(location_ids, locations.rows(), "location"),
            REScenario::SpatialCategorical {
                locations,
                location_ids,
                cardinalities,
                level_ids,
            } => {
                check_ids(location_ids, locations.rows(), "location")?;
                for (ids, &q) in level_ids.iter().zip(cardinalities) {
                    if ids.len() != location_ids.len() {
                        return Err(Error::Shape("id vectors must share length".into()));
                    }
                    check_ids(ids, q, "level")?;
                }
                Ok(())
            }
        }
    }

    /// Number of random-effect terms (KL summands, encoder output pairs).
    pub fn num_terms(&self) -> usize {
        match self {
            REScenario::Categorical { cardinalities, .. } => cardinalities.len(),
            REScenario::Longitudinal { poly_terms, .. } => *poly_terms,
            REScenario::Spatial { .. } => 1,
            REScenario::SpatialCategorical { cardinalities, .. } => 1 + cardinalities.len(),
        }
    }

    /// Column count of the full design matrix, summed over terms.
    pub fn total_q(&self) -> usize {
        self.term_designs().iter().map(|t| t.cardinality).sum()
    }

    /// Index of the term whose aggregated effects get the spatial
    /// posterior factor applied, if any.
    pub fn spatial_term(&self) -> Option<usize> {
        match self {
            REScenario::Spatial { .. } | REScenario::SpatialCategorical { .. } => Some(0),
            _ => None,
        }
    }

    pub fn locations(&self) -> Option<&Matrix> {
        match self {
            REScenario::Spatial { locations, .. }
            | REScenario::SpatialCategorical { locations, .. } => Some(locations),
            _ => None,
        }
    }

    /// Expands the scenario into one [`TermDesign`] per random-effect term.
    pub fn term_designs(&self) -> Vec<TermDesign> {
        let unit_weights = |n: usize| vec![1.0; n];
        match self {
            REScenario::Categorical {
                cardinalities,
                level_ids,
            } => cardinalities
                .iter()
                .zip(level_ids)
                .map(|(&q, ids)| TermDesign {
                    cardinality: q,
                    levels: ids.clone(),
                    weights: unit_weights(ids.len()),
                })
                .collect(),
            REScenario::Longitudinal {
                subjects,
                poly_terms,
                subject_ids,
                times,
            } => (0..*poly_terms)
                .map(|k| TermDesign {
                    cardinality: *subjects,
                    levels: subject_ids.clone(),
                    weights: times
                        .iter()
                        .map(|&t| {
                            if k == 0 {
                                1.0
                            } else {
                                num_traits::Float::powi(t, k as i32)
                            }
                        })
                        .collect(),
                })
                .collect(),
            REScenario::Spatial {
                locations,
                location_ids,
            } => vec![TermDesign {
                cardinality: locations.rows(),
                levels: location_ids.clone(),
                weights: unit_weights(location_ids.len()),
            }],
            REScenario::SpatialCategorical {
                locations,
                location_ids,
                cardinalities,
                level_ids,
            } => {
                let mut terms = vec![TermDesign {
                    cardinality: locations.rows(),
                    levels: location_ids.clone(),
                    weights: unit_weights(location_ids.len()),
                }];
                terms.extend(
                    cardinalities
                        .iter()
                        .zip(level_ids)
                        .map(|(&q, ids)| TermDesign {
                            cardinality: q,
                            levels: ids.clone(),
                            weights: unit_weights(ids.len()),
                        }),
                );
                terms
            }
        }
    }

    /// Assembles the full sparse design matrix with one column block per
    /// term.
    pub fn build_z(&self) -> Result<SparseIndicator> {
        self.validate()?;
        let terms = self.term_designs();
        let n = self.n_rows();
        let total_q = self.total_q();
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut offset = 0;
        for term in &terms {
            for ((row, level), &w) in rows.iter_mut().zip(&term.levels).zip(&term.weights) {
                if let Some(level) = level {
                    if w != 0.0 {
                        row.push((offset + level, w));
                    }
                }
            }
            offset += term.cardinality;
        }
        SparseIndicator::from_rows(total_q, rows)
    }

    /// The categorical view of the scenario used by one-hot and embedding
    /// baselines: one `(cardinality, per-row levels)` pair per underlying
    /// grouping feature. Longitudinal data exposes the subject id once
    /// (time powers are a random-effect construction, not a feature), and
    /// spatial data exposes the location id.
    pub fn aux_terms(&self) -> Vec<(usize, Vec<Option<usize>>)> {
        match self {
            REScenario::Categorical {
                cardinalities,
                level_ids,
            } => cardinalities
                .iter()
                .zip(level_ids)
                .map(|(&q, ids)| (q, ids.clone()))
                .collect(),
            REScenario::Longitudinal {
                subjects,
                subject_ids,
                ..
            } => {
                vec![(*subjects, subject_ids.clone())]
            }
            REScenario::Spatial {
                locations,
                location_ids,
            } => {
                vec![(locations.rows(), location_ids.clone())]
            }
            REScenario::SpatialCategorical {
                locations,
                location_ids,
                cardinalities,
                level_ids,
            } => {
                let mut out = vec![(locations.rows(), location_ids.clone())];
                out.extend(
                    cardinalities
                        .iter()
                        .zip(level_ids)
                        .map(|(&q, ids)| (q, ids.clone())),
                );
                out
            }
        }
    }

    /// One-hot design over the auxiliary view: one indicator block per
    /// grouping feature.
    pub fn ohe_design(&self) -> Result<SparseIndicator> {
        let aux = self.aux_terms();
        let cards: Vec<usize> = aux.iter().map(|(q, _)| *q).collect();
        let ids: Vec<Vec<Option<usize>>> = aux.into_iter().map(|(_, ids)| ids).collect();
        build_categorical_z(&ids, &cards)
    }

    /// Scenario restricted to the given rows (metadata such as
    /// cardinalities and locations is kept whole).
    pub fn subset(&self, rows: &[usize]) -> REScenario {
        let pick_ids = |ids: &Vec<Option<usize>>| rows.iter().map(|&r| ids[r]).collect();
        match self {
            REScenario::Categorical {
                cardinalities,
                level_ids,
            } => REScenario::Categorical {
                cardinalities: cardinalities.clone(),
                level_ids: level_ids.iter().map(pick_ids).collect(),
            },
            REScenario::Longitudinal {
                subjects,
                poly_terms,
                subject_ids,
                times,
            } => REScenario::Longitudinal {
                subjects: *subjects,
                poly_terms: *poly_terms,
                subject_ids: pick_ids(subject_ids),
                times: rows.iter().map(|&r| times[r]).collect(),
            },
            REScenario::Spatial {
                locations,
                location_ids,
            } => REScenario::Spatial {
                locations: locations.clone(),
                location_ids: pick_ids(location_ids),
            },
            REScenario::SpatialCategorical {
                locations,
                location_ids,
                cardinalities,
                level_ids,
            } => REScenario::SpatialCategorical {
                locations: locations.clone(),
                location_ids: pick_ids(location_ids),
                cardinalities: cardinalities.clone(),
                level_ids: level_ids.iter().map(pick_ids).collect(),
            },
        }
    }
}

/// Per-scenario prior specification for the random effects.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct REPrior {
    /// Log prior variance per random-effect term (`delta = log sigma_b^2`).
    pub delta_b: Vec<f64>,
    /// Kernel length scale (spatial scenarios).
    pub length_scale_sq: f64,
    /// Observation noise variance used by the spatial posterior.
    pub noise_var: f64,
}

impl REPrior {
    /// The standard prior: unit variance for every term (`delta = 0`),
    /// unit kernel length scale and unit noise.
    pub fn standard(num_terms: usize) -> Self {
        REPrior {
            delta_b: vec![0.0; num_terms],
            length_scale_sq: 1.0,
            noise_var: 1.0,
        }
    }

    pub fn validate(&self, num_terms: usize) -> Result<()> {
        if self.delta_b.len() != num_terms {
            return Err(Error::Shape(format!(
                "prior has {} delta_b entries, scenario has {num_terms} terms",
                self.delta_b.len()
            )));
        }
        if self.delta_b.iter().any(|d| !d.is_finite()) {
            return Err(Error::InvalidArgument("delta_b must be finite".into()));
        }
        if self.length_scale_sq <= 0.0 {
            return Err(Error::InvalidArgument(
                "length_scale_sq must be positive".into(),
            ));
        }
        if self.noise_var <= 0.0 {
            return Err(Error::InvalidArgument("noise_var must be positive".into()));
        }
        Ok(())
    }
}
