//! Brute-force references: plug-in mutual information and exhaustive
//! cardinality-constrained subset search over small discrete tables.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{clusters_entropy, entropy};

pub const MAX_VARIABLES: usize = 20;
pub const MAX_ALPHABET: usize = 16;
/// MI values closer than this are treated as tied during the search.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTable {
    /// Samples x variables.
    pub z: Vec<Vec<i64>>,
    pub y: Vec<i64>,
}

impl DiscreteTable {
    pub fn new(z: Vec<Vec<i64>>, y: Vec<i64>) -> Result<Self> {
        if z.len() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} rows, {} targets", z.len(), y.len())));
        }
        let vars = z.first().map_or(0, Vec::len);
        if z.iter().any(|r| r.len() != vars) {
            return Err(Error::DimensionMismatch("ragged table rows".into()));
        }
        let t = Self { z, y };
        t.check_bounds()?;
        Ok(t)
    }

    pub fn variables(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }

    pub fn samples(&self) -> usize {
        self.y.len()
    }

    fn check_bounds(&self) -> Result<()> {
        if self.variables() > MAX_VARIABLES {
            return Err(Error::InvalidInput(format!(
                "{} variables exceed the exhaustive bound of {MAX_VARIABLES}",
                self.variables()
            )));
        }
        let alphabet = |vals: &mut dyn Iterator<Item = i64>| -> usize {
            let mut v: Vec<i64> = vals.collect();
            v.sort_unstable();
            v.dedup();
            v.len()
        };
        for j in 0..self.variables() {
            let a = alphabet(&mut self.z.iter().map(|r| r[j]));
            if a > MAX_ALPHABET {
                return Err(Error::InvalidInput(format!(
                    "variable {j} has {a} symbols, bound is {MAX_ALPHABET}"
                )));
            }
        }
        Ok(())
    }

    /// Dense joint code per row for the chosen columns.
    fn joint_codes(&self, subset: &[usize]) -> Result<Vec<usize>> {
        if let Some(&bad) = subset.iter().find(|&&j| j >= self.variables()) {
            return Err(Error::InvalidInput(format!("variable {bad} out of range")));
        }
        let mut codes: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
        Ok(self
            .z
            .iter()
            .map(|r| {
                let key: Vec<i64> = subset.iter().map(|&j| r[j]).collect();
                let next = codes.len();
                *codes.entry(key).or_insert(next)
            })
            .collect())
    }
}

/// Plug-in `I(Z_S; Y)` in bits; the empty subset has zero information.
pub fn empirical_mi(table: &DiscreteTable, subset: &[usize]) -> Result<f64> {
    if table.samples() == 0 {
        return Err(Error::InvalidInput("empty table".into()));
    }
    let codes = table.joint_codes(subset)?;
    let h = entropy(&table.y)?;
    Ok((h - clusters_entropy(&codes, &table.y)?).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CniSolution {
    pub subset: Vec<usize>,
    pub mi: f64,
}

fn for_each_combination(n: usize, size: usize, f: &mut dyn FnMut(&[usize]) -> Result<()>) -> Result<()> {
    let mut idx: Vec<usize> = (0..size).collect();
    loop {
        f(&idx)?;
        let Some(pos) = (0..size).rev().find(|&i| idx[i] != i + n - size) else {
            return Ok(());
        };
        idx[pos] += 1;
        for i in pos + 1..size {
            idx[i] = idx[i - 1] + 1;
        }
    }
}

/// Exhaustive `argmax_{|S| <= k} I(Z_S; Y)`; ties go to the
/// lexicographically smallest index list.
pub fn discrete_cni(table: &DiscreteTable, k: usize) -> Result<CniSolution> {
    table.check_bounds()?;
    let p = table.variables();
    let mut best = CniSolution {
        subset: Vec::new(),
        mi: empirical_mi(table, &[])?,
    };
    for size in 1..=k.min(p) {
        for_each_combination(p, size, &mut |s| {
            let mi = empirical_mi(table, s)?;
            let better = mi > best.mi + TIE_TOL || (mi >= best.mi - TIE_TOL && s < best.subset.as_slice());
            if better {
                best = CniSolution {
                    subset: s.to_vec(),
                    mi,
                };
            }
            Ok(())
        })?;
    }
    Ok(best)
}

/// 1 where a value exceeds its column median, else 0.
pub fn median_binarize(x: &DMatrix<f64>) -> Vec<Vec<i64>> {
    let medians: Vec<f64> = x
        .column_iter()
        .map(|c| {
            let mut v: Vec<f64> = c.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n == 0 {
                0.0
            } else if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        })
        .collect();
    x.row_iter()
        .map(|r| r.iter().zip(&medians).map(|(v, m)| (*v > *m) as i64).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xor_table() -> DiscreteTable {
        let mut z = Vec::new();
        let mut y = Vec::new();
        for rep in 0..3 {
            for a in 0..2 {
                for b in 0..2 {
                    z.push(vec![a, b, (rep + a) % 2]);
                    y.push(a ^ b);
                }
            }
        }
        DiscreteTable::new(z, y).unwrap()
    }

    #[test]
    fn mi_examples() {
        let t = DiscreteTable::new(vec![vec![0], vec![1], vec![0], vec![1]], vec![0, 1, 0, 1]).unwrap();
        assert_eq!(empirical_mi(&t, &[0]).unwrap(), 1.0);
        let t = DiscreteTable::new(
            vec![vec![0], vec![0], vec![1], vec![1]],
            vec![0, 1, 0, 1],
        )
        .unwrap();
        assert_eq!(empirical_mi(&t, &[0]).unwrap(), 0.0);
        let x = xor_table();
        assert_eq!(empirical_mi(&x, &[0]).unwrap(), 0.0);
        assert_eq!(empirical_mi(&x, &[0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn cni_examples() {
        let x = xor_table();
        assert_eq!(
            discrete_cni(&x, 2).unwrap(),
            CniSolution {
                subset: vec![0, 1],
                mi: 1.0
            }
        );
        assert_eq!(discrete_cni(&x, 0).unwrap(), CniSolution { subset: vec![], mi: 0.0 });
        let c = DiscreteTable::new(vec![vec![0, 1], vec![1, 0]], vec![3, 3]).unwrap();
        assert_eq!(discrete_cni(&c, 2).unwrap(), CniSolution { subset: vec![], mi: 0.0 });
        let full = discrete_cni(&x, 3).unwrap();
        assert!((full.mi - empirical_mi(&x, &[0, 1, 2]).unwrap()).abs() <= TIE_TOL);
    }

    #[test]
    fn bounds() {
        assert!(DiscreteTable::new(vec![vec![0; 21]], vec![0]).is_err());
        let z = (0..17).map(|i| vec![i]).collect();
        assert!(DiscreteTable::new(z, vec![0; 17]).is_err());
    }

    #[test]
    fn binarize_at_median() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 6.0]);
        assert_eq!(median_binarize(&x), vec![vec![0, 0], vec![0, 0], vec![1, 0], vec![1, 1]]);
    }
}
