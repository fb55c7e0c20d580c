//! Fitted regression designs and the compressed, model-ready view of a dataset.
//!
//! Each additive formula becomes a feature map `covariate row -> feature row`
//! so that every linear predictor is an inner product with a flat coefficient
//! vector. Spline terms occupy one contiguous segment each (in formula order),
//! followed by a single segment holding all linear terms.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{standardize_continuous, CauseSpec, Dataset, ModelSpec, Standardization, Term};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::splines::SplineBasis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FittedTerm {
    Linear { column: usize, offset: usize },
    Spline { column: usize, offset: usize, standardization: Standardization, basis: SplineBasis<f64> },
}

/// A contiguous block of coefficients updated together by the sampler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Spline { column: usize, range: Range<usize> },
    Linear { range: Range<usize> },
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        match self {
            Segment::Spline { range, .. } | Segment::Linear { range } => range.clone(),
        }
    }

    pub fn is_spline(&self) -> bool {
        matches!(self, Segment::Spline { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideDesign {
    terms: Vec<FittedTerm>,
    n_coef: usize,
    width: usize,
}

impl SideDesign {
    /// Fits standardizations and spline bases for `formula` on the given rows of `design`.
    pub fn fit(formula: &[Term], design: &Array2<f64>, rows: &[usize]) -> Result<Self> {
        let mut terms = Vec::with_capacity(formula.len());
        let mut offset = 0;
        for term in formula {
            if let Term::Spline { column, df } = *term {
                let values: Vec<f64> = rows.iter().map(|&i| design[[i, column]]).collect();
                let (z, standardization) = standardize_continuous(&values)?;
                let basis = SplineBasis::build(&z, df)?;
                terms.push(FittedTerm::Spline { column, offset, standardization, basis });
                offset += df;
            }
        }
        for term in formula {
            if let Term::Linear { column } = *term {
                terms.push(FittedTerm::Linear { column, offset });
                offset += 1;
            }
        }
        Ok(Self { terms, n_coef: offset, width: design.ncols() })
    }

    /// Design with no terms (constant predictor).
    pub fn empty(width: usize) -> Self {
        Self { terms: Vec::new(), n_coef: 0, width }
    }

    pub fn n_coef(&self) -> usize {
        self.n_coef
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn terms(&self) -> &[FittedTerm] {
        &self.terms
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut linear: Option<Range<usize>> = None;
        for term in &self.terms {
            match term {
                FittedTerm::Spline { column, offset, basis, .. } => {
                    out.push(Segment::Spline { column: *column, range: *offset..*offset + basis.n_basis() })
                }
                FittedTerm::Linear { offset, .. } => {
                    linear = Some(match linear {
                        None => *offset..*offset + 1,
                        Some(r) => r.start..*offset + 1,
                    })
                }
            }
        }
        if let Some(range) = linear {
            out.push(Segment::Linear { range });
        }
        out
    }

    /// Feature row for one raw covariate row (length = design width).
    pub fn features(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.width {
            return Err(Error::Dimension(format!("covariate row has {} columns, design expects {}", raw.len(), self.width)));
        }
        let mut out = vec![0.0; self.n_coef];
        for term in &self.terms {
            match term {
                FittedTerm::Linear { column, offset } => out[*offset] = raw[*column],
                FittedTerm::Spline { column, offset, standardization, basis } => {
                    let row = basis.row(standardization.apply(raw[*column]));
                    out[*offset..*offset + row.len()].copy_from_slice(&row);
                }
            }
        }
        Ok(out)
    }

    pub fn feature_matrix(&self, raw: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((raw.nrows(), self.n_coef));
        for (i, row) in raw.rows().into_iter().enumerate() {
            let f = self.features(&row.to_vec())?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&f));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub etiology: SideDesign,
    pub subclass: SideDesign,
}

impl Design {
    /// Etiology terms are fitted on case rows, subclass terms on all subjects.
    pub fn fit(dataset: &Dataset, spec: &ModelSpec) -> Result<Self> {
        spec.validate(dataset)?;
        let cases = dataset.case_indices();
        let all: Vec<usize> = (0..dataset.n_subjects()).collect();
        Ok(Self {
            etiology: SideDesign::fit(&spec.etiology_formula, dataset.x_design(), &cases)?,
            subclass: SideDesign::fit(&spec.subclass_formula, dataset.w_design(), &all)?,
        })
    }
}

/// Measurements plus deduplicated feature rows, ready for likelihood evaluation.
#[derive(Debug, Clone)]
pub struct PreparedData<T> {
    pub brs: Array2<u8>,
    pub ss: Array2<Option<u8>>,
    pub ss_pathogens: Vec<usize>,
    pub is_case: Vec<bool>,
    pub cases: Vec<usize>,
    pub controls: Vec<usize>,
    /// Unique etiology feature rows.
    pub x_features: Array2<T>,
    /// Per-subject index into `x_features`.
    pub x_row: Vec<usize>,
    pub w_features: Array2<T>,
    pub w_row: Vec<usize>,
    pub causes: CauseSpec,
    /// `causal[l][j]`: pathogen `j` is causative in class `l`.
    pub causal: Vec<Vec<bool>>,
    /// `ss_causal[l][s]`: SS column `s` belongs to a pathogen causative in class `l`.
    pub ss_causal: Vec<Vec<bool>>,
    pub k: usize,
}

fn dedupe<T: Real>(features: &Array2<f64>) -> (Array2<T>, Vec<usize>) {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut map = Vec::with_capacity(features.nrows());
    for row in features.rows() {
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let id = *index.entry(key).or_insert_with(|| {
            rows.push(row.to_vec());
            rows.len() - 1
        });
        map.push(id);
    }
    let width = features.ncols();
    let mut out = Array2::from_elem((rows.len(), width), T::zero());
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            out[[r, c]] = T::lit(*v);
        }
    }
    (out, map)
}

impl<T: Real> PreparedData<T> {
    pub fn new(dataset: &Dataset, spec: &ModelSpec, design: &Design) -> Result<Self> {
        let x = design.etiology.feature_matrix(dataset.x_design())?;
        let w = design.subclass.feature_matrix(dataset.w_design())?;
        let (ss, ss_pathogens) = if spec.ss_enabled {
            (dataset.ss().clone(), dataset.ss_pathogens().to_vec())
        } else {
            (Array2::from_elem((dataset.n_subjects(), 0), None), Vec::new())
        };
        Self::from_parts(
            dataset.brs().clone(),
            ss,
            ss_pathogens,
            dataset.y().to_vec(),
            &x,
            &w,
            spec.causes.clone(),
            spec.k_subclasses,
        )
    }

    /// Assembles prepared data from per-subject feature matrices.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        brs: Array2<u8>,
        ss: Array2<Option<u8>>,
        ss_pathogens: Vec<usize>,
        is_case: Vec<bool>,
        x_features: &Array2<f64>,
        w_features: &Array2<f64>,
        causes: CauseSpec,
        k: usize,
    ) -> Result<Self> {
        let n = is_case.len();
        let j = brs.ncols();
        if brs.nrows() != n || ss.nrows() != n || x_features.nrows() != n || w_features.nrows() != n {
            return Err(Error::Dimension("prepared data parts disagree on the number of subjects".into()));
        }
        if ss.ncols() != ss_pathogens.len() {
            return Err(Error::Dimension("SS columns and SS pathogen map differ in length".into()));
        }
        if k == 0 {
            return Err(Error::Spec("k_subclasses must be >= 1".into()));
        }
        causes.validate(j)?;
        let causal = causes.causal_mask(j);
        let ss_causal = causal.iter().map(|row| ss_pathogens.iter().map(|&p| row[p]).collect()).collect();
        let cases = (0..n).filter(|&i| is_case[i]).collect();
        let controls = (0..n).filter(|&i| !is_case[i]).collect();
        let (xf, x_row) = dedupe(x_features);
        let (wf, w_row) = dedupe(w_features);
        Ok(Self {
            brs,
            ss,
            ss_pathogens,
            is_case,
            cases,
            controls,
            x_features: xf,
            x_row,
            w_features: wf,
            w_row,
            causes,
            causal,
            ss_causal,
            k,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.is_case.len()
    }

    pub fn n_pathogens(&self) -> usize {
        self.brs.ncols()
    }

    pub fn n_causes(&self) -> usize {
        self.causes.len()
    }

    pub fn n_x_coef(&self) -> usize {
        self.x_features.ncols()
    }

    pub fn n_w_coef(&self) -> usize {
        self.w_features.ncols()
    }

    pub fn x_of(&self, i: usize) -> &[T] {
        self.x_features.row(self.x_row[i]).to_slice().expect("standard layout")
    }

    pub fn w_of(&self, i: usize) -> &[T] {
        self.w_features.row(self.w_row[i]).to_slice().expect("standard layout")
    }

    pub fn brs_of(&self, i: usize) -> &[u8] {
        self.brs.row(i).to_slice().expect("standard layout")
    }
}
