//! Data model and design assembly.
//!
//! Raw data are curves on a shared grid with scalar covariates per replicate.
//! Assembly turns them into per-cluster stacked designs: responses are
//! concatenated grid-major within a replicate, replicates stacked in order,
//! and the fixed design column for covariate `k`, basis function `u` holds
//! `x_ijk * B_ku(s_t)` with columns grouped covariate-major. The random-effect
//! side works through the lower-triangular Cholesky parameterization of the
//! random covariance: a layout maps the stacked row-major triangle entries to
//! their matrix positions, which is exactly the information carried by the
//! binary duplication matrix relating the stacked triangle to the column-major
//! vectorization of the full factor.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::basis::BSplineBasis;
use crate::error::{Error, Result};

/// Formats a float with 17 significant digits, enough for an exact
/// decimal-to-binary round trip.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// One cluster of raw observations.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCluster {
    /// Responses, one row per replicate, one column per grid point.
    pub responses: Array2<f64>,
    /// Fixed-effect covariates, one row per replicate.
    pub x: Array2<f64>,
    /// Random-effect covariates, one row per replicate.
    pub z: Array2<f64>,
}

impl RawCluster {
    pub fn replicates(&self) -> usize {
        self.responses.nrows()
    }
}

/// A full dataset: clusters sharing one observation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub grid: Vec<f64>,
    pub clusters: Vec<RawCluster>,
    pub p: usize,
    pub q: usize,
}

impl RawDataset {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn grid_len(&self) -> usize {
        self.grid.len()
    }

    /// Total number of scalar observations `N = m * sum_i J_i`.
    pub fn n_obs(&self) -> usize {
        self.grid.len() * self.clusters.iter().map(RawCluster::replicates).sum::<usize>()
    }

    /// Validates internal shape consistency.
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Data("empty observation grid".into()));
        }
        if self.clusters.is_empty() {
            return Err(Error::Data("dataset has no clusters".into()));
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Data("grid points must be strictly increasing".into()));
        }
        for (i, c) in self.clusters.iter().enumerate() {
            let j = c.replicates();
            if j == 0 {
                return Err(Error::Data(format!("cluster {i} has no replicates")));
            }
            if c.responses.ncols() != self.grid.len() {
                return Err(Error::Data(format!(
                    "cluster {i}: {} response columns but {} grid points",
                    c.responses.ncols(),
                    self.grid.len()
                )));
            }
            if c.x.nrows() != j || c.z.nrows() != j {
                return Err(Error::Data(format!(
                    "cluster {i}: covariate rows do not match {j} replicates"
                )));
            }
            if c.x.ncols() != self.p || c.z.ncols() != self.q {
                return Err(Error::Data(format!(
                    "cluster {i}: covariate columns do not match p={} q={}",
                    self.p, self.q
                )));
            }
        }
        Ok(())
    }

    /// Returns a copy with every non-constant covariate column centered and
    /// scaled to unit standard deviation across all replicates of all
    /// clusters. Constant columns (e.g. an intercept) are left untouched.
    pub fn standardized(&self) -> RawDataset {
        let mut out = self.clone();
        let total: usize = self.clusters.iter().map(RawCluster::replicates).sum();
        for (ncols, get) in [(self.p, false), (self.q, true)] {
            for col in 0..ncols {
                let mut mean = 0.0;
                for c in &self.clusters {
                    let m = if get { &c.z } else { &c.x };
                    for row in 0..m.nrows() {
                        mean += m[[row, col]];
                    }
                }
                mean /= total as f64;
                let mut var = 0.0;
                for c in &self.clusters {
                    let m = if get { &c.z } else { &c.x };
                    for row in 0..m.nrows() {
                        let d = m[[row, col]] - mean;
                        var += d * d;
                    }
                }
                var /= total as f64;
                if var <= 0.0 {
                    continue;
                }
                let sd = var.sqrt();
                for c in &mut out.clusters {
                    let m = if get { &mut c.z } else { &mut c.x };
                    for row in 0..m.nrows() {
                        m[[row, col]] = (m[[row, col]] - mean) / sd;
                    }
                }
            }
        }
        out
    }
}

/// Contiguous column blocks of the fixed-effect design, one per covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl BlockLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDimension(
                "block layout needs at least one block of positive size".into(),
            ));
        }
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0;
        for &d in &dims {
            offsets.push(total);
            total += d;
        }
        Ok(Self {
            dims,
            offsets,
            total,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn range(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k] + self.dims[k]
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        (0..self.dims.len()).map(|k| self.range(k)).collect()
    }
}

/// Index layout of the stacked lower triangle of the random-effect Cholesky
/// factor `L`.
///
/// `L` is square of size `sum_r d'_r`; block `r` consists of the `d'_r` rows
/// belonging to random effect `r`. The triangle is stacked row-major, so the
/// layout records, per stacked entry, its `(row, column)` position in `L`,
/// and per block the range of stacked indices it owns. This is the sparse
/// form of the binary duplication matrix: column `j` of that matrix has its
/// single 1 at the column-major vectorization index of entry `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyLayout {
    dims: Vec<usize>,
    total: usize,
    entries: Vec<(usize, usize)>,
    blocks: Vec<Range<usize>>,
}

impl CholeskyLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDimension(
                "cholesky layout needs at least one random effect of positive dimension".into(),
            ));
        }
        let total: usize = dims.iter().sum();
        let mut entries = Vec::with_capacity(total * (total + 1) / 2);
        let mut blocks = Vec::with_capacity(dims.len());
        let mut row = 0;
        for &d in &dims {
            let start = entries.len();
            for _ in 0..d {
                for col in 0..=row {
                    entries.push((row, col));
                }
                row += 1;
            }
            blocks.push(start..entries.len());
        }
        Ok(Self {
            dims,
            total,
            entries,
            blocks,
        })
    }

    /// Layout with `q` random effects of common dimension `d_prime`.
    pub fn uniform(d_prime: usize, q: usize) -> Result<Self> {
        if d_prime == 0 || q == 0 {
            return Err(Error::InvalidDimension(format!(
                "uniform cholesky layout needs positive dimensions, got d'={d_prime} q={q}"
            )));
        }
        Self::new(vec![d_prime; q])
    }

    pub fn q(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Size of `L` (number of rows).
    pub fn total_dim(&self) -> usize {
        self.total
    }

    /// Number of stacked triangle entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(row, col)` of each stacked entry, row-major over the triangle.
    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    /// Stacked-index range owned by each random effect.
    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    /// Number of stacked entries per block; for a uniform layout with
    /// dimension `d'` this is `d'^2 (r - 1) + d' (d' + 1) / 2` for the r-th
    /// block (1-based).
    pub fn group_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len()).collect()
    }

    /// Rebuilds the dense lower-triangular factor from stacked entries.
    pub fn expand(&self, ltilde: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        if ltilde.len() != self.entries.len() {
            return Err(Error::InvalidDimension(format!(
                "expected {} stacked entries, got {}",
                self.entries.len(),
                ltilde.len()
            )));
        }
        let mut l = Array2::zeros((self.total, self.total));
        for (j, &(row, col)) in self.entries.iter().enumerate() {
            l[[row, col]] = ltilde[j];
        }
        Ok(l)
    }

    /// Materializes the binary duplication matrix: the map from stacked
    /// triangle entries to the column-major vectorization of `L`.
    pub fn duplication_matrix(&self) -> Array2<f64> {
        let d = self.total;
        let mut mat = Array2::zeros((d * d, self.entries.len()));
        for (j, &(row, col)) in self.entries.iter().enumerate() {
            mat[[col * d + row, j]] = 1.0;
        }
        mat
    }
}

/// Duplication matrix for `q` random effects of common dimension `d_prime`.
pub fn duplication_matrix(d_prime: usize, q: usize) -> Result<Array2<f64>> {
    Ok(CholeskyLayout::uniform(d_prime, q)?.duplication_matrix())
}

/// Design matrix of the stacked-triangle coordinates for one cluster:
/// the matrix `U` with `U * ltilde = Z * expand(ltilde) * b`, i.e. the
/// Kronecker row `b^T (x) Z` composed with the duplication matrix. Column `j`
/// of the result is `b[col_j] * z[:, row_j]` where `(row_j, col_j)` is the
/// matrix position of stacked entry `j`.
pub fn random_effect_design(
    z: ArrayView2<'_, f64>,
    b: ArrayView1<'_, f64>,
    layout: &CholeskyLayout,
) -> Result<Array2<f64>> {
    if z.ncols() != layout.total_dim() || b.len() != layout.total_dim() {
        return Err(Error::InvalidDimension(format!(
            "random design: z has {} columns, b has {} entries, layout needs {}",
            z.ncols(),
            b.len(),
            layout.total_dim()
        )));
    }
    let rows = z.nrows();
    let mut out = Array2::zeros((rows, layout.len()));
    for (j, &(zrow, bcol)) in layout.entries().iter().enumerate() {
        let scale = b[bcol];
        if scale == 0.0 {
            continue;
        }
        let src = z.column(zrow);
        let mut dst = out.column_mut(j);
        for r in 0..rows {
            dst[r] = scale * src[r];
        }
    }
    Ok(out)
}

/// Fully assembled per-cluster design.
#[derive(Debug, Clone)]
pub struct ClusterDesign {
    /// Stacked response, grid-major within replicate.
    pub y: Array1<f64>,
    /// Fixed-effect design.
    pub x: Array2<f64>,
    /// Random-effect basis design (covariate times basis, covariate-major).
    pub z: Array2<f64>,
    /// `Z^T Z`, cached for the factored Gram computations.
    pub gram_z: Array2<f64>,
    /// Row range of this cluster in the stacked dataset.
    pub rows: Range<usize>,
}

/// Assembled model: designs plus the layouts that define the penalty groups.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub clusters: Vec<ClusterDesign>,
    pub fixed: BlockLayout,
    pub chol: CholeskyLayout,
    pub grid: Vec<f64>,
    pub fixed_bases: Vec<BSplineBasis>,
    pub random_bases: Vec<BSplineBasis>,
    n_obs: usize,
}

impl ModelData {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// `N = m * sum_i J_i`.
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn p(&self) -> usize {
        self.fixed.n_blocks()
    }

    pub fn q(&self) -> usize {
        self.chol.q()
    }

    /// Stacks all cluster fixed designs into one `N x dim` matrix.
    pub fn stacked_x(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_obs, self.fixed.total()));
        for c in &self.clusters {
            out.slice_mut(ndarray::s![c.rows.start..c.rows.end, ..])
                .assign(&c.x);
        }
        out
    }
}

/// Expands raw data against per-covariate bases.
///
/// `fixed_bases` and `random_bases` must have one entry per fixed / random
/// covariate; every grid point must lie inside each basis domain.
pub fn assemble(
    raw: &RawDataset,
    fixed_bases: &[BSplineBasis],
    random_bases: &[BSplineBasis],
) -> Result<ModelData> {
    raw.validate()?;
    if fixed_bases.len() != raw.p {
        return Err(Error::InvalidDimension(format!(
            "{} fixed bases for p={} covariates",
            fixed_bases.len(),
            raw.p
        )));
    }
    if random_bases.len() != raw.q {
        return Err(Error::InvalidDimension(format!(
            "{} random bases for q={} covariates",
            random_bases.len(),
            raw.q
        )));
    }
    let m = raw.grid.len();
    let fixed = BlockLayout::new(fixed_bases.iter().map(|b| b.num_basis()).collect())?;
    let chol = CholeskyLayout::new(random_bases.iter().map(|b| b.num_basis()).collect())?;
    let fixed_eval: Vec<Array2<f64>> = fixed_bases
        .iter()
        .map(|b| b.evaluate_matrix(&raw.grid))
        .collect::<Result<_>>()?;
    let random_eval: Vec<Array2<f64>> = random_bases
        .iter()
        .map(|b| b.evaluate_matrix(&raw.grid))
        .collect::<Result<_>>()?;

    let mut clusters = Vec::with_capacity(raw.clusters.len());
    let mut row_start = 0;
    for c in &raw.clusters {
        let j_reps = c.replicates();
        let rows = j_reps * m;
        let mut y = Array1::zeros(rows);
        let mut x = Array2::zeros((rows, fixed.total()));
        let mut z = Array2::zeros((rows, chol.total_dim()));
        for j in 0..j_reps {
            for t in 0..m {
                let row = j * m + t;
                y[row] = c.responses[[j, t]];
                for k in 0..raw.p {
                    let cov = c.x[[j, k]];
                    let basis = &fixed_eval[k];
                    let off = fixed.range(k).start;
                    for u in 0..basis.ncols() {
                        x[[row, off + u]] = cov * basis[[t, u]];
                    }
                }
                let mut off = 0;
                for r in 0..raw.q {
                    let cov = c.z[[j, r]];
                    let basis = &random_eval[r];
                    for v in 0..basis.ncols() {
                        z[[row, off + v]] = cov * basis[[t, v]];
                    }
                    off += basis.ncols();
                }
            }
        }
        let gram_z = z.t().dot(&z);
        clusters.push(ClusterDesign {
            y,
            x,
            z,
            gram_z,
            rows: row_start..row_start + rows,
        });
        row_start += rows;
    }
    Ok(ModelData {
        clusters,
        fixed,
        chol,
        grid: raw.grid.clone(),
        fixed_bases: fixed_bases.to_vec(),
        random_bases: random_bases.to_vec(),
        n_obs: row_start,
    })
}

/// Default fixed-effect basis dimension: enough interior knots to track the
/// bumpy coefficient shapes that arise in practice without inflating the
/// penalized blocks.
pub const DEFAULT_FIXED_BASIS_DIM: usize = 8;
/// Default random-effect basis dimension, slightly coarser than the fixed
/// side since cluster deviations are estimated from far fewer curves.
pub const DEFAULT_RANDOM_BASIS_DIM: usize = 6;

/// Assembles with uniform-width cubic bases built on the grid's span.
pub fn assemble_with_dims(raw: &RawDataset, d_fixed: usize, d_random: usize) -> Result<ModelData> {
    let (lo, hi) = grid_span(&raw.grid)?;
    let fixed: Vec<BSplineBasis> = (0..raw.p)
        .map(|_| BSplineBasis::cubic(d_fixed, lo, hi))
        .collect::<Result<_>>()?;
    let random: Vec<BSplineBasis> = (0..raw.q)
        .map(|_| BSplineBasis::cubic(d_random, lo, hi))
        .collect::<Result<_>>()?;
    assemble(raw, &fixed, &random)
}

/// Assembles with per-covariate basis dimensions.
pub fn assemble_with_dim_lists(
    raw: &RawDataset,
    d_fixed: &[usize],
    d_random: &[usize],
) -> Result<ModelData> {
    let (lo, hi) = grid_span(&raw.grid)?;
    let fixed: Vec<BSplineBasis> = d_fixed
        .iter()
        .map(|&d| BSplineBasis::cubic(d, lo, hi))
        .collect::<Result<_>>()?;
    let random: Vec<BSplineBasis> = d_random
        .iter()
        .map(|&d| BSplineBasis::cubic(d, lo, hi))
        .collect::<Result<_>>()?;
    assemble(raw, &fixed, &random)
}

fn grid_span(grid: &[f64]) -> Result<(f64, f64)> {
    match (grid.first(), grid.last()) {
        (Some(&lo), Some(&hi)) if lo < hi => Ok((lo, hi)),
        _ => Err(Error::Data(
            "grid must contain at least two increasing points".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Dataset CSV interchange
// ---------------------------------------------------------------------------

/// Writes a dataset in long format: header
/// `cluster,replicate,s,y,x1..xp,z1..zq`, one row per scalar observation,
/// cluster and replicate ids 1-based, floats with 17 significant digits.
pub fn write_dataset_csv(raw: &RawDataset, path: &Path) -> Result<()> {
    raw.validate()?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("cluster,replicate,s,y");
    for k in 1..=raw.p {
        header.push_str(&format!(",x{k}"));
    }
    for r in 1..=raw.q {
        header.push_str(&format!(",z{r}"));
    }
    writeln!(out, "{header}")?;
    for (i, c) in raw.clusters.iter().enumerate() {
        for j in 0..c.replicates() {
            for (t, &s) in raw.grid.iter().enumerate() {
                let mut line = format!(
                    "{},{},{},{}",
                    i + 1,
                    j + 1,
                    format_float(s),
                    format_float(c.responses[[j, t]])
                );
                for k in 0..raw.p {
                    line.push(',');
                    line.push_str(&format_float(c.x[[j, k]]));
                }
                for r in 0..raw.q {
                    line.push(',');
                    line.push_str(&format_float(c.z[[j, r]]));
                }
                writeln!(out, "{line}")?;
            }
        }
    }
    Ok(())
}

/// Reads a long-format dataset written by [`write_dataset_csv`] (or any file
/// with the same header shape). Rows may appear in any order; they are
/// grouped by cluster and replicate id and sorted along the grid. Every
/// `(cluster, replicate)` pair must cover exactly the same grid, and the
/// covariates must be constant within a replicate.
pub fn read_dataset_csv(path: &Path) -> Result<RawDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 5 || cols[0] != "cluster" || cols[1] != "replicate" || cols[2] != "s" || cols[3] != "y"
    {
        return Err(Error::Data(format!(
            "{}: header must start with cluster,replicate,s,y",
            path.display()
        )));
    }
    let mut p = 0;
    let mut idx = 4;
    while idx < cols.len() && cols[idx] == format!("x{}", p + 1) {
        p += 1;
        idx += 1;
    }
    let mut q = 0;
    while idx < cols.len() && cols[idx] == format!("z{}", q + 1) {
        q += 1;
        idx += 1;
    }
    if idx != cols.len() || p == 0 || q == 0 {
        return Err(Error::Data(format!(
            "{}: expected contiguous x1..xp then z1..zq columns, got {:?}",
            path.display(),
            cols
        )));
    }

    struct Row {
        s: f64,
        y: f64,
        x: Vec<f64>,
        z: Vec<f64>,
        line: u64,
    }
    let mut groups: BTreeMap<(u64, u64), Vec<Row>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        let ctx = |what: &str| format!("{} line {line}: {what}", path.display());
        if record.len() != cols.len() {
            return Err(Error::Data(ctx(&format!(
                "expected {} fields, got {}",
                cols.len(),
                record.len()
            ))));
        }
        let parse_int = |field: usize, name: &str| -> Result<u64> {
            record[field]
                .trim()
                .parse::<u64>()
                .map_err(|e| Error::Data(ctx(&format!("bad {name} id {:?}: {e}", &record[field]))))
        };
        let parse_f = |field: usize, name: &str| -> Result<f64> {
            record[field]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Data(ctx(&format!("bad {name} value {:?}: {e}", &record[field]))))
        };
        let cluster = parse_int(0, "cluster")?;
        let replicate = parse_int(1, "replicate")?;
        let s = parse_f(2, "s")?;
        let y = parse_f(3, "y")?;
        let mut x = Vec::with_capacity(p);
        for k in 0..p {
            x.push(parse_f(4 + k, &format!("x{}", k + 1))?);
        }
        let mut z = Vec::with_capacity(q);
        for r in 0..q {
            z.push(parse_f(4 + p + r, &format!("z{}", r + 1))?);
        }
        groups
            .entry((cluster, replicate))
            .or_default()
            .push(Row { s, y, x, z, line });
    }
    if groups.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    // Infer the common grid from the sorted unique s values of the file.
    let mut grid: Vec<f64> = groups
        .values()
        .flat_map(|rows| rows.iter().map(|r| r.s))
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut clusters_map: BTreeMap<u64, Vec<(u64, Vec<Row>)>> = BTreeMap::new();
    for ((cluster, replicate), mut rows) in groups {
        rows.sort_by(|a, b| a.s.total_cmp(&b.s));
        if rows.len() != grid.len()
            || rows.iter().zip(&grid).any(|(r, &g)| r.s != g)
        {
            return Err(Error::Data(format!(
                "{}: cluster {cluster} replicate {replicate} does not cover the common grid \
                 ({} of {} points)",
                path.display(),
                rows.len(),
                grid.len()
            )));
        }
        for r in &rows {
            if r.x != rows[0].x || r.z != rows[0].z {
                return Err(Error::Data(format!(
                    "{} line {}: covariates vary within cluster {cluster} replicate {replicate}",
                    path.display(),
                    r.line
                )));
            }
        }
        clusters_map
            .entry(cluster)
            .or_default()
            .push((replicate, rows));
    }

    let mut clusters = Vec::with_capacity(clusters_map.len());
    for (_, mut reps) in clusters_map {
        reps.sort_by_key(|(rep, _)| *rep);
        let j_reps = reps.len();
        let mut responses = Array2::zeros((j_reps, grid.len()));
        let mut x = Array2::zeros((j_reps, p));
        let mut z = Array2::zeros((j_reps, q));
        for (j, (_, rows)) in reps.iter().enumerate() {
            for (t, row) in rows.iter().enumerate() {
                responses[[j, t]] = row.y;
            }
            for k in 0..p {
                x[[j, k]] = rows[0].x[k];
            }
            for r in 0..q {
                z[[j, r]] = rows[0].z[r];
            }
        }
        clusters.push(RawCluster { responses, x, z });
    }
    let raw = RawDataset {
        grid,
        clusters,
        p,
        q,
    };
    raw.validate()?;
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn basis(d: usize) -> BSplineBasis {
        BSplineBasis::cubic(d, 0.0, 1.0).unwrap()
    }

    fn random_raw(seed: u64, n: usize, j: usize, m: usize, p: usize, q: usize) -> RawDataset {
        let mut rng = StdRng::seed_from_u64(seed);
        let grid: Vec<f64> = (0..m).map(|t| t as f64 / (m - 1) as f64).collect();
        let clusters = (0..n)
            .map(|_| RawCluster {
                responses: Array2::from_shape_fn((j, m), |_| rng.random_range(-1.0..1.0)),
                x: Array2::from_shape_fn((j, p), |_| rng.random_range(-2.0..2.0)),
                z: Array2::from_shape_fn((j, q), |_| rng.random_range(-2.0..2.0)),
            })
            .collect();
        RawDataset {
            grid,
            clusters,
            p,
            q,
        }
    }

    #[test]
    fn single_point_design_rows() {
        // One cluster, one replicate, intercept-only, endpoints of the grid:
        // clamped basis rows are the unit vectors at the endpoints.
        let raw = RawDataset {
            grid: vec![0.0, 1.0],
            clusters: vec![RawCluster {
                responses: array![[1.0, 2.0]],
                x: array![[1.0]],
                z: array![[1.0]],
            }],
            p: 1,
            q: 1,
        };
        let data = assemble(&raw, &[basis(4)], &[basis(4)]).unwrap();
        let x = &data.clusters[0].x;
        assert_eq!(x.shape(), &[2, 4]);
        assert_abs_diff_eq!(x[[0, 0]], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x[[1, 3]], 1.0, epsilon = 1e-14);
        assert!(x[[0, 1]].abs() < 1e-14 && x[[1, 0]].abs() < 1e-14);
        assert_eq!(data.n_obs(), 2);
        assert_eq!(data.clusters[0].y, array![1.0, 2.0]);
    }

    #[test]
    fn columns_are_covariate_major() {
        let raw = RawDataset {
            grid: vec![0.0, 1.0],
            clusters: vec![RawCluster {
                responses: array![[0.0, 0.0]],
                x: array![[2.0, 5.0]],
                z: array![[1.0]],
            }],
            p: 2,
            q: 1,
        };
        let data = assemble(&raw, &[basis(4), basis(4)], &[basis(4)]).unwrap();
        let x = &data.clusters[0].x;
        // Row for s=0: covariate 1 occupies columns 0..4, covariate 2 columns 4..8.
        assert_abs_diff_eq!(x[[0, 0]], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x[[0, 4]], 5.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x[[1, 3]], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x[[1, 7]], 5.0, epsilon = 1e-14);
        assert_eq!(data.fixed.range(1), 4..8);
    }

    #[test]
    fn rows_are_grid_major_then_replicates() {
        let raw = random_raw(5, 1, 2, 3, 1, 1);
        let data = assemble(&raw, &[basis(4)], &[basis(4)]).unwrap();
        let c = &raw.clusters[0];
        let y = &data.clusters[0].y;
        for j in 0..2 {
            for t in 0..3 {
                assert_eq!(y[j * 3 + t], c.responses[[j, t]]);
            }
        }
    }

    #[test]
    fn fixed_design_matches_triple_loop() {
        // Heterogeneous basis dimensions across covariates.
        let raw = random_raw(11, 2, 2, 4, 2, 1);
        let bases = [basis(4), basis(5)];
        let data = assemble(&raw, &bases, &[basis(4)]).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        let gamma: Vec<f64> = (0..data.fixed.total()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (i, c) in data.clusters.iter().enumerate() {
            let fitted = c.x.dot(&Array1::from_vec(gamma.clone()));
            for j in 0..raw.clusters[i].replicates() {
                for (t, &s) in raw.grid.iter().enumerate() {
                    let mut want = 0.0;
                    for k in 0..2 {
                        let b = bases[k].evaluate(s).unwrap();
                        let off = data.fixed.range(k).start;
                        for u in 0..bases[k].num_basis() {
                            want += gamma[off + u] * raw.clusters[i].x[[j, k]] * b[u];
                        }
                    }
                    assert_abs_diff_eq!(fitted[j * 4 + t], want, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn responses_do_not_leak_into_designs() {
        let mut raw_a = random_raw(3, 2, 2, 3, 2, 2);
        let raw_b = raw_a.clone();
        for c in &mut raw_a.clusters {
            c.responses.map_inplace(|v| *v += 100.0);
        }
        let bases_f = [basis(4), basis(4)];
        let bases_r = [basis(4), basis(4)];
        let da = assemble(&raw_a, &bases_f, &bases_r).unwrap();
        let db = assemble(&raw_b, &bases_f, &bases_r).unwrap();
        for (ca, cb) in da.clusters.iter().zip(&db.clusters) {
            assert_eq!(ca.x, cb.x);
            assert_eq!(ca.z, cb.z);
            assert_ne!(ca.y, cb.y);
        }
    }

    #[test]
    fn smallest_duplication_matrices() {
        let layout = CholeskyLayout::uniform(1, 1).unwrap();
        assert_eq!(layout.duplication_matrix(), array![[1.0]]);

        // Two scalar effects: L is 2x2, triangle (l11, l21, l22); the
        // column-major vectorization is (l11, l21, 0, l22).
        let layout = CholeskyLayout::uniform(1, 2).unwrap();
        let dup = layout.duplication_matrix();
        let expected = array![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0]
        ];
        assert_eq!(dup, expected);
    }

    #[test]
    fn duplication_matrix_shape_and_orthonormal_columns() {
        for (dp, q) in [(1, 3), (2, 2), (3, 2), (2, 4)] {
            let layout = CholeskyLayout::uniform(dp, q).unwrap();
            let d = dp * q;
            let len = d * (d + 1) / 2;
            let dup = layout.duplication_matrix();
            assert_eq!(dup.shape(), &[d * d, len]);
            for col in dup.columns() {
                assert_eq!(col.iter().filter(|v| **v == 1.0).count(), 1);
                assert_eq!(col.iter().filter(|v| **v != 0.0).count(), 1);
            }
            let gram = dup.t().dot(&dup);
            for i in 0..len {
                for j in 0..len {
                    assert_eq!(gram[[i, j]], if i == j { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn expand_round_trips_through_vectorization() {
        let layout = CholeskyLayout::new(vec![2, 3]).unwrap();
        let mut rng = StdRng::seed_from_u64(21);
        let ltilde = Array1::from_shape_fn(layout.len(), |_| rng.random_range(-1.0..1.0));
        let l = layout.expand(ltilde.view()).unwrap();
        // Strict upper triangle is zero.
        for i in 0..layout.total_dim() {
            for j in (i + 1)..layout.total_dim() {
                assert_eq!(l[[i, j]], 0.0);
            }
        }
        // vec(L), column-major, equals the duplication matrix applied to the
        // stacked entries — exactly, both being pure copies.
        let dup = layout.duplication_matrix();
        let vec_l = dup.dot(&ltilde);
        let d = layout.total_dim();
        for col in 0..d {
            for row in 0..d {
                assert_eq!(vec_l[col * d + row], l[[row, col]]);
            }
        }
        // Zero stacking expands to the zero matrix.
        let zero = layout.expand(Array1::zeros(layout.len()).view()).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn group_sizes_match_closed_form_and_brute_force() {
        for dp in 1..=3 {
            for q in 1..=5 {
                let layout = CholeskyLayout::uniform(dp, q).unwrap();
                let sizes = layout.group_sizes();
                for (r0, &size) in sizes.iter().enumerate() {
                    let r = r0 + 1;
                    let closed = dp * dp * (r - 1) + dp * (dp + 1) / 2;
                    assert_eq!(size, closed, "dp={dp} q={q} r={r}");
                    // Brute force: lower-triangle entries in the block's rows.
                    let brute: usize = (r0 * dp..r * dp).map(|row| row + 1).sum();
                    assert_eq!(size, brute);
                }
                assert_eq!(
                    sizes.iter().sum::<usize>(),
                    layout.total_dim() * (layout.total_dim() + 1) / 2
                );
            }
        }
    }

    #[test]
    fn random_design_satisfies_kronecker_identity() {
        let layout = CholeskyLayout::new(vec![2, 3]).unwrap();
        let mut rng = StdRng::seed_from_u64(33);
        let z = Array2::from_shape_fn((7, layout.total_dim()), |_| rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(layout.total_dim(), |_| rng.random_range(-1.0..1.0));
        let ltilde = Array1::from_shape_fn(layout.len(), |_| rng.random_range(-1.0..1.0));
        let u = random_effect_design(z.view(), b.view(), &layout).unwrap();
        let via_design = u.dot(&ltilde);
        let l = layout.expand(ltilde.view()).unwrap();
        let via_matrix = z.dot(&l).dot(&b);
        for (a, bb) in via_design.iter().zip(via_matrix.iter()) {
            assert_abs_diff_eq!(*a, *bb, epsilon = 1e-12);
        }

        // Against the dense Kronecker row composed with the duplication matrix.
        let d = layout.total_dim();
        let mut kron = Array2::zeros((7, d * d));
        for c in 0..d * d {
            let (bcol, zrow) = (c / d, c % d);
            for row in 0..7 {
                kron[[row, c]] = b[bcol] * z[[row, zrow]];
            }
        }
        let dense = kron.dot(&layout.duplication_matrix());
        assert_eq!(u, dense);

        // b = 0 gives the zero design.
        let zero = random_effect_design(z.view(), Array1::zeros(d).view(), &layout).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn standardize_centers_and_scales_nonconstant_columns() {
        let raw = random_raw(9, 3, 4, 3, 2, 2);
        let mut with_intercept = raw.clone();
        for c in &mut with_intercept.clusters {
            for j in 0..c.replicates() {
                c.x[[j, 0]] = 1.0;
            }
        }
        let std = with_intercept.standardized();
        // Intercept untouched.
        for c in &std.clusters {
            for j in 0..c.replicates() {
                assert_eq!(c.x[[j, 0]], 1.0);
            }
        }
        // Second column has mean 0, sd 1 across all replicates.
        let vals: Vec<f64> = std
            .clusters
            .iter()
            .flat_map(|c| (0..c.replicates()).map(|j| c.x[[j, 1]]).collect::<Vec<_>>())
            .collect();
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn csv_round_trip_preserves_dataset() {
        let raw = random_raw(17, 3, 2, 4, 2, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_dataset_csv(&raw, &path).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(raw, back);

        // Byte-identical when written twice.
        let path2 = dir.path().join("data2.csv");
        write_dataset_csv(&raw, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn csv_rows_may_be_shuffled() {
        let raw = random_raw(23, 2, 2, 3, 1, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_dataset_csv(&raw, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let (header, body) = lines.split_at_mut(1);
        body.reverse();
        let shuffled = format!("{}\n{}\n", header[0], body.join("\n"));
        let path2 = dir.path().join("shuffled.csv");
        std::fs::write(&path2, shuffled).unwrap();
        assert_eq!(read_dataset_csv(&path2).unwrap(), raw);
    }

    #[test]
    fn csv_detects_grid_mismatch_and_bad_values() {
        let raw = random_raw(29, 2, 1, 3, 1, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_dataset_csv(&raw, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        // Drop one observation row: that replicate no longer covers the grid.
        let mut lines: Vec<&str> = text.lines().collect();
        lines.remove(2);
        let path2 = dir.path().join("missing.csv");
        std::fs::write(&path2, lines.join("\n")).unwrap();
        match read_dataset_csv(&path2) {
            Err(Error::Data(msg)) => assert!(msg.contains("does not cover"), "{msg}"),
            other => panic!("expected grid mismatch error, got {other:?}"),
        }

        // Corrupt a numeric field, expect a line-numbered diagnostic.
        let bad = text.replacen("0.0000000000000000e0", "not-a-number", 1);
        let path3 = dir.path().join("bad.csv");
        std::fs::write(&path3, bad).unwrap();
        match read_dataset_csv(&path3) {
            Err(Error::Data(msg)) => assert!(msg.contains("line"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -3.25e-17, 1.0 / 3.0, 12345.6789, f64::MIN_POSITIVE] {
            let s = format_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }
}
