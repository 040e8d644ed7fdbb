//! Flat parameter vectors with a named schema and constraint transforms.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::{invalid, Result};

/// How a stored unconstrained block maps to the model field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// Elementwise `exp`; keeps the field strictly positive.
    Log,
    /// Lower triangle kept, diagonal through `exp`; yields a Cholesky factor.
    TrilLogDiag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub transform: Transform,
}

impl Field {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All trainable parameters in unconstrained form. Blocks are stored
/// column-major, matching nalgebra.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    fields: Vec<Field>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a field given its constrained value.
    pub fn push(&mut self, name: impl Into<String>, value: &DMatrix<f64>, transform: Transform) -> Result<()> {
        let name = name.into();
        if self.fields.iter().any(|f| f.name == name) {
            return Err(invalid(format!("duplicate parameter field `{name}`")));
        }
        let raw = unconstrain(value, transform).map_err(|m| invalid(format!("field `{name}`: {m}")))?;
        self.fields.push(Field {
            name,
            offset: self.values.len(),
            rows: value.nrows(),
            cols: value.ncols(),
            transform,
        });
        self.values.extend_from_slice(raw.as_slice());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Unconstrained block of a field.
    pub fn raw(&self, name: &str) -> Result<DMatrix<f64>> {
        let f = self.field(name).ok_or_else(|| invalid(format!("unknown parameter field `{name}`")))?;
        Ok(DMatrix::from_column_slice(f.rows, f.cols, &self.values[f.offset..f.offset + f.len()]))
    }

    /// Constrained (model-space) value of a field.
    pub fn get(&self, name: &str) -> Result<DMatrix<f64>> {
        let f = self.field(name).ok_or_else(|| invalid(format!("unknown parameter field `{name}`")))?;
        Ok(constrain(&self.raw(name)?, f.transform))
    }

    /// Field name and in-block index for a flat position, e.g. `layer0.gamma[1]`.
    pub fn describe(&self, index: usize) -> String {
        for f in &self.fields {
            if index >= f.offset && index < f.offset + f.len() {
                let k = index - f.offset;
                return if f.len() == 1 {
                    f.name.clone()
                } else {
                    format!("{}[{},{}]", f.name, k % f.rows, k / f.rows)
                };
            }
        }
        format!("#{index}")
    }

    /// Registers every field as a leaf on `tape`.
    pub fn bind<'t>(&'t self, tape: &'t Tape) -> Bound<'t> {
        let leaves = self
            .fields
            .iter()
            .map(|f| tape.var(DMatrix::from_column_slice(f.rows, f.cols, &self.values[f.offset..f.offset + f.len()])))
            .collect();
        Bound { pv: self, leaves }
    }
}

/// A [`ParamVector`] whose fields live on a tape.
pub struct Bound<'t> {
    pv: &'t ParamVector,
    leaves: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    fn index(&self, name: &str) -> usize {
        self.pv
            .fields
            .iter()
            .position(|f| f.name == name)
            .unwrap_or_else(|| panic!("unknown parameter field `{name}`"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.pv.field(name).is_some()
    }

    /// Unconstrained leaf.
    pub fn raw(&self, name: &str) -> Var<'t> {
        self.leaves[self.index(name)]
    }

    /// Constrained value, differentiable with respect to the leaf.
    pub fn get(&self, name: &str) -> Var<'t> {
        let i = self.index(name);
        let v = self.leaves[i];
        match self.pv.fields[i].transform {
            Transform::Identity => v,
            Transform::Log => v.exp(),
            Transform::TrilLogDiag => v.tril_exp_diag(),
        }
    }

    pub(crate) fn leaves(&self) -> &[Var<'t>] {
        &self.leaves
    }

    pub(crate) fn params(&self) -> &ParamVector {
        self.pv
    }
}

fn constrain(raw: &DMatrix<f64>, t: Transform) -> DMatrix<f64> {
    match t {
        Transform::Identity => raw.clone(),
        Transform::Log => raw.map(f64::exp),
        Transform::TrilLogDiag => {
            let mut out = crate::linalg::tril(raw);
            for i in 0..raw.nrows().min(raw.ncols()) {
                out[(i, i)] = raw[(i, i)].exp();
            }
            out
        }
    }
}

fn unconstrain(value: &DMatrix<f64>, t: Transform) -> std::result::Result<DMatrix<f64>, String> {
    match t {
        Transform::Identity => Ok(value.clone()),
        Transform::Log => {
            if value.iter().any(|&x| !(x > 0.0)) {
                return Err("log-transformed values must be positive".into());
            }
            Ok(value.map(f64::ln))
        }
        Transform::TrilLogDiag => {
            if value.nrows() != value.ncols() {
                return Err("triangular factor must be square".into());
            }
            let mut out = crate::linalg::tril(value);
            for i in 0..value.nrows() {
                let d = value[(i, i)];
                if !(d > 0.0) {
                    return Err("triangular factor needs a positive diagonal".into());
                }
                out[(i, i)] = d.ln();
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_transforms() {
        let mut pv = ParamVector::new();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -3.0, 2.5, 4.0]);
        let p = DMatrix::from_row_slice(1, 3, &[0.1, 2.0, 7.5]);
        let l = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, -1.2, 2.0]);
        pv.push("a", &a, Transform::Identity).unwrap();
        pv.push("p", &p, Transform::Log).unwrap();
        pv.push("l", &l, Transform::TrilLogDiag).unwrap();
        assert_eq!(pv.len(), 11);
        assert_eq!(pv.get("a").unwrap(), a);
        assert!((pv.get("p").unwrap() - p).amax() < 1e-12);
        assert!((pv.get("l").unwrap() - l).amax() < 1e-12);
        assert_eq!(pv.describe(5), "p[0,1]");
        assert_eq!(pv.describe(7), "l[0,0]");
    }

    #[test]
    fn rejects_bad_values() {
        let mut pv = ParamVector::new();
        assert!(pv.push("p", &DMatrix::from_element(1, 1, 0.0), Transform::Log).is_err());
        assert!(pv.push("l", &DMatrix::from_element(1, 1, -1.0), Transform::TrilLogDiag).is_err());
        pv.push("x", &DMatrix::zeros(1, 1), Transform::Identity).unwrap();
        assert!(pv.push("x", &DMatrix::zeros(1, 1), Transform::Identity).is_err());
    }

    #[test]
    fn bound_get_matches_plain_get() {
        let mut pv = ParamVector::new();
        let l = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, -1.2, 2.0]);
        pv.push("l", &l, Transform::TrilLogDiag).unwrap();
        let tape = Tape::new();
        let b = pv.bind(&tape);
        assert!((b.get("l").value() - l).amax() < 1e-12);
    }
}
