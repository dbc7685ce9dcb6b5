//! Lattice ("quilt") parameter decompositions.
//!
//! A parameter that varies over a multi-dimensional cohort lattice is
//! stored as a sum of component tensors, one per subset `S` of lattice
//! dimensions with `|S| ≤ max_order`. The component for `S` is indexed
//! only by the coordinates in `S`; the remaining axes are wildcards. The
//! value in cell `κ` is the sum of every component evaluated at `κ`
//! restricted to its subset:
//!
//! ```text
//! θ(κ) = θ(∗,…,∗) + Σ_d θ(κ_d) + Σ_{d<e} θ(κ_d, κ_e) + …
//! ```
//!
//! Every cell value is a vector of `width` entries (for example one entry
//! per time interval). Components of order `o` carry independent
//! `N(0, (base·decay^o)²)` priors so that higher-order interactions are
//! pooled toward the lower-order terms they refine.
//!
//! Storage is sparse in the lattice sense: only the retained subset tensors
//! are materialized, never the full lattice.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::scalar::{half_cauchy_log_density, normal_log_density, Scalar};

/// One lattice axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub dims: Vec<Dim>,
    pub max_order: usize,
}

impl LatticeSpec {
    pub fn new(dims: &[(&str, usize)], max_order: usize) -> Result<Self> {
        let spec = Self {
            dims: dims
                .iter()
                .map(|&(name, size)| Dim {
                    name: name.to_string(),
                    size,
                })
                .collect(),
            max_order,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A lattice with a single cell.
    pub fn global() -> Self {
        Self {
            dims: Vec::new(),
            max_order: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.dims.iter().find(|d| d.size == 0) {
            return Err(Error::invalid(format!("lattice axis `{}` has size 0", d.name)));
        }
        if self.max_order > self.dims.len() {
            return Err(Error::invalid(format!(
                "max order {} exceeds {} lattice dimensions",
                self.max_order,
                self.dims.len()
            )));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.dims.iter().map(|d| d.size).product()
    }

    pub fn check_index(&self, kappa: &[usize]) -> Result<()> {
        if kappa.len() != self.dims.len() {
            return Err(Error::Dimension {
                context: "lattice multi-index",
                expected: self.dims.len(),
                actual: kappa.len(),
            });
        }
        for (d, &k) in self.dims.iter().zip(kappa) {
            if k >= d.size {
                return Err(Error::OutOfBounds {
                    axis: d.name.clone(),
                    index: k,
                    size: d.size,
                });
            }
        }
        Ok(())
    }

    /// Multi-index of the `cell`-th lattice cell, last axis fastest.
    pub fn unravel(&self, mut cell: usize) -> Vec<usize> {
        let mut kappa = vec![0; self.dims.len()];
        for (slot, d) in kappa.iter_mut().zip(&self.dims).rev() {
            *slot = cell % d.size;
            cell /= d.size;
        }
        kappa
    }

    pub fn ravel(&self, kappa: &[usize]) -> usize {
        kappa
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&k, d)| acc * d.size + k)
    }

    pub fn cells(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.n_cells()).map(|c| self.unravel(c))
    }

    /// Every dimension subset of size `≤ max_order`, by order then lexically.
    pub fn subsets(&self) -> Vec<Vec<usize>> {
        let d = self.dims.len();
        let mut out = Vec::new();
        for order in 0..=self.max_order {
            let mut combo: Vec<usize> = (0..order).collect();
            loop {
                out.push(combo.clone());
                // next combination of `order` elements out of `d`
                let mut i = order;
                while i > 0 && combo[i - 1] == d - order + i - 1 {
                    i -= 1;
                }
                if i == 0 {
                    break;
                }
                combo[i - 1] += 1;
                for j in i..order {
                    combo[j] = combo[j - 1] + 1;
                }
            }
        }
        out
    }

    pub fn dim_names(&self) -> Vec<&str> {
        self.dims.iter().map(|d| d.name.as_str()).collect()
    }
}

/// Placement of one component tensor inside a flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentLayout {
    /// Lattice axes indexing this component.
    pub dims: Vec<usize>,
    pub strides: Vec<usize>,
    pub n_cells: usize,
    /// Offset of the component within the decomposition's flat storage.
    pub offset: usize,
}

impl ComponentLayout {
    pub fn order(&self) -> usize {
        self.dims.len()
    }
}

/// Index arithmetic for a decomposition, independent of the values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeLayout {
    pub spec: LatticeSpec,
    pub width: usize,
    pub components: Vec<ComponentLayout>,
    pub len: usize,
}

impl LatticeLayout {
    pub fn new(spec: LatticeSpec, width: usize) -> Result<Self> {
        spec.validate()?;
        let mut components = Vec::new();
        let mut offset = 0;
        for dims in spec.subsets() {
            let mut strides = vec![0; dims.len()];
            let mut n_cells = 1;
            for (slot, &d) in strides.iter_mut().zip(&dims).rev() {
                *slot = n_cells;
                n_cells *= spec.dims[d].size;
            }
            components.push(ComponentLayout {
                dims,
                strides,
                n_cells,
                offset,
            });
            offset += n_cells * width;
        }
        Ok(Self {
            spec,
            width,
            components,
            len: offset,
        })
    }

    pub fn max_order(&self) -> usize {
        self.spec.max_order
    }

    /// Start offsets of the `width`-long rows that sum to cell `κ`.
    /// Unchecked; call [`LatticeSpec::check_index`] first for untrusted input.
    pub fn rows_unchecked(&self, kappa: &[usize], out: &mut Vec<usize>) {
        out.clear();
        for c in &self.components {
            let cell: usize = c.dims.iter().zip(&c.strides).map(|(&d, &s)| kappa[d] * s).sum();
            out.push(c.offset + cell * self.width);
        }
    }

    pub fn rows(&self, kappa: &[usize]) -> Result<Vec<usize>> {
        self.spec.check_index(kappa)?;
        let mut out = Vec::with_capacity(self.components.len());
        self.rows_unchecked(kappa, &mut out);
        Ok(out)
    }

    /// Sum the rows for `κ` out of an arbitrary flat buffer.
    pub fn assemble_from<T: Scalar>(&self, values: &[T], rows: &[usize], out: &mut [T]) {
        out.iter_mut().for_each(|v| *v = T::zero());
        for &r in rows {
            for (o, &v) in out.iter_mut().zip(&values[r..r + self.width]) {
                *o = *o + v;
            }
        }
    }

    /// Component order of every flat entry.
    pub fn entry_orders(&self) -> Vec<usize> {
        let mut orders = vec![0; self.len];
        for c in &self.components {
            let end = c.offset + c.n_cells * self.width;
            orders[c.offset..end].iter_mut().for_each(|o| *o = c.order());
        }
        orders
    }

    /// Number of retained subsets of each order `0..=max_order`.
    pub fn subsets_per_order(&self) -> Vec<usize> {
        let mut n = vec![0; self.max_order() + 1];
        for c in &self.components {
            n[c.order()] += 1;
        }
        n
    }
}

/// A lattice-indexed parameter stored as order-truncated components.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeDecomposition<T> {
    pub layout: LatticeLayout,
    pub values: Vec<T>,
}

impl<T: Scalar> LatticeDecomposition<T> {
    pub fn zeros(spec: LatticeSpec, width: usize) -> Result<Self> {
        let layout = LatticeLayout::new(spec, width)?;
        let values = vec![T::zero(); layout.len];
        Ok(Self { layout, values })
    }

    pub fn from_values(layout: LatticeLayout, values: Vec<T>) -> Result<Self> {
        if values.len() != layout.len {
            return Err(Error::Dimension {
                context: "decomposition values",
                expected: layout.len,
                actual: values.len(),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn width(&self) -> usize {
        self.layout.width
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.layout.spec
    }

    /// Stored scalar count: the sum of the retained tensor sizes.
    pub fn n_params(&self) -> usize {
        self.values.len()
    }

    /// Mutable view of the component for the given dimension subset.
    pub fn component_mut(&mut self, dims: &[usize]) -> Option<&mut [T]> {
        let w = self.layout.width;
        let c = self.layout.components.iter().find(|c| c.dims == dims)?;
        Some(&mut self.values[c.offset..c.offset + c.n_cells * w])
    }

    pub fn component(&self, dims: &[usize]) -> Option<&[T]> {
        let w = self.layout.width;
        let c = self.layout.components.iter().find(|c| c.dims == dims)?;
        Some(&self.values[c.offset..c.offset + c.n_cells * w])
    }

    /// Value at cell `κ`: the sum over retained components.
    pub fn assemble(&self, kappa: &[usize]) -> Result<Vec<T>> {
        let rows = self.layout.rows(kappa)?;
        let mut out = vec![T::zero(); self.width()];
        self.layout.assemble_from(&self.values, &rows, &mut out);
        Ok(out)
    }

    /// `a·self + b·other` for decompositions over the same layout.
    pub fn linear_combination(&self, a: T, other: &Self, b: T) -> Result<Self> {
        if self.layout != other.layout {
            return Err(Error::invalid("decompositions have different layouts"));
        }
        Ok(Self {
            layout: self.layout.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        })
    }

    /// Sum of independent Gaussian log-densities, scale `base·decay^order`.
    pub fn prior_log_density(&self, base_scale: T, decay: T) -> Result<T> {
        if !(base_scale > T::zero()) || !(decay > T::zero() && decay <= T::one()) {
            return Err(Error::invalid("prior needs base_scale > 0 and 0 < decay ≤ 1"));
        }
        let w = self.width();
        let mut total = T::zero();
        for c in &self.layout.components {
            let sd = base_scale * decay.powi(c.order() as i32);
            for &v in &self.values[c.offset..c.offset + c.n_cells * w] {
                total = total + normal_log_density(v, T::zero(), sd);
            }
        }
        Ok(total)
    }

    /// Every lattice cell with its assembled value.
    pub fn dump_cells(&self) -> Vec<(Vec<usize>, Vec<T>)> {
        let mut rows = Vec::new();
        let mut out = vec![T::zero(); self.width()];
        self.layout
            .spec
            .cells()
            .map(|kappa| {
                self.layout.rows_unchecked(&kappa, &mut rows);
                self.layout.assemble_from(&self.values, &rows, &mut out);
                (kappa, out.clone())
            })
            .collect()
    }

    /// Write `<stem>.json` (layout manifest) and `<stem>.bin` (values).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let manifest = DecompositionManifest {
            version: MANIFEST_VERSION,
            layout: self.layout.clone(),
            subsets: self
                .layout
                .components
                .iter()
                .map(|c| {
                    c.dims
                        .iter()
                        .map(|&d| self.layout.spec.dims[d].name.clone())
                        .collect()
                })
                .collect(),
            blob: format!("{stem}.bin"),
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        let as_f64: Vec<f64> = self.values.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        blob::write_arrays(&dir.join(&manifest.blob), &[&as_f64])
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let manifest: DecompositionManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::invalid(format!(
                "unsupported decomposition version {}",
                manifest.version
            )));
        }
        let arrays = blob::read_arrays(&dir.join(&manifest.blob))?;
        let values = arrays
            .into_iter()
            .next()
            .ok_or_else(|| Error::invalid("empty decomposition blob"))?
            .into_iter()
            .map(T::lit)
            .collect();
        Self::from_values(manifest.layout, values)
    }
}

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DecompositionManifest {
    version: u32,
    layout: LatticeLayout,
    /// Human-readable subset list (axis names per component).
    subsets: Vec<Vec<String>>,
    blob: String,
}

/// Prior correlation between two cells' assembled values.
///
/// `order_variances[o]` is the prior variance contributed by order `o`,
/// orders `0..=shared_order` are identical in both cells, and higher orders
/// have within-order correlation `within_order_rho[o]` (entries at or below
/// `shared_order` are ignored).
pub fn implied_correlation<T: Scalar>(
    order_variances: &[T],
    shared_order: usize,
    within_order_rho: &[T],
) -> Result<T> {
    if within_order_rho.len() != order_variances.len() {
        return Err(Error::Dimension {
            context: "within-order correlations",
            expected: order_variances.len(),
            actual: within_order_rho.len(),
        });
    }
    if order_variances.iter().any(|&v| v < T::zero() || !v.is_finite()) {
        return Err(Error::invalid("order variances must be finite and non-negative"));
    }
    if within_order_rho.iter().any(|&r| !(r >= -T::one() && r <= T::one())) {
        return Err(Error::invalid("within-order correlations must lie in [-1, 1]"));
    }
    let total = order_variances.iter().fold(T::zero(), |a, &v| a + v);
    if total <= T::zero() {
        return Err(Error::invalid("total prior variance is zero"));
    }
    let shared = order_variances
        .iter()
        .zip(within_order_rho)
        .enumerate()
        .fold(T::zero(), |acc, (o, (&v, &r))| {
            acc + if o <= shared_order { v } else { r * v }
        });
    Ok(shared / total)
}

/// Order-wise sharing between two cells of a decomposition whose
/// order-`o` components have prior standard deviation `component_sd[o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStructure<T> {
    /// Variance of the order-`o` sum in one cell.
    pub order_variances: Vec<T>,
    /// Largest order such that every component up to it is shared.
    pub shared_order: usize,
    /// Fraction of order-`o` components the two cells share.
    pub within_order_rho: Vec<T>,
}

pub fn pair_structure<T: Scalar>(
    layout: &LatticeLayout,
    kappa1: &[usize],
    kappa2: &[usize],
    component_sd: &[T],
) -> Result<PairStructure<T>> {
    layout.spec.check_index(kappa1)?;
    layout.spec.check_index(kappa2)?;
    let orders = layout.max_order() + 1;
    if component_sd.len() != orders {
        return Err(Error::Dimension {
            context: "per-order component scales",
            expected: orders,
            actual: component_sd.len(),
        });
    }
    let n = layout.subsets_per_order();
    let mut shared = vec![0usize; orders];
    for c in &layout.components {
        if c.dims.iter().all(|&d| kappa1[d] == kappa2[d]) {
            shared[c.order()] += 1;
        }
    }
    let order_variances: Vec<T> = (0..orders)
        .map(|o| T::from_usize_lossy(n[o]) * component_sd[o] * component_sd[o])
        .collect();
    let within_order_rho: Vec<T> = (0..orders)
        .map(|o| T::from_usize_lossy(shared[o]) / T::from_usize_lossy(n[o]))
        .collect();
    // The global term is shared by every pair of cells.
    let shared_order = (0..orders).take_while(|&o| shared[o] == n[o]).count() - 1;
    Ok(PairStructure {
        order_variances,
        shared_order,
        within_order_rho,
    })
}

/// Local-global shrinkage state for one coefficient block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorseshoeState<T> {
    pub coefficients: Vec<T>,
    pub local_scales: Vec<T>,
    pub global_scale: T,
}

impl<T: Scalar> HorseshoeState<T> {
    /// `Σ_j [log N(β_j | 0, λ_j τ) + log C⁺(λ_j)] + log C⁺(τ)`.
    pub fn log_density(&self) -> Result<T> {
        horseshoe_log_density(&self.coefficients, &self.local_scales, self.global_scale)
    }
}

pub fn horseshoe_log_density<T: Scalar>(
    coefficients: &[T],
    local_scales: &[T],
    global_scale: T,
) -> Result<T> {
    if coefficients.len() != local_scales.len() {
        return Err(Error::Dimension {
            context: "horseshoe local scales",
            expected: coefficients.len(),
            actual: local_scales.len(),
        });
    }
    if !(global_scale > T::zero()) || local_scales.iter().any(|&l| !(l > T::zero())) {
        return Err(Error::invalid("horseshoe scales must be strictly positive"));
    }
    let mut total = half_cauchy_log_density(global_scale);
    for (&b, &l) in coefficients.iter().zip(local_scales) {
        total = total + normal_log_density(b, T::zero(), l * global_scale) + half_cauchy_log_density(l);
    }
    Ok(total)
}
