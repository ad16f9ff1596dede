//! Synthetic datasets, the non-IID partitioners, and CSV ingestion.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numerics::{axpy, dot, norm, Matrix, SimRng};

/// Number of clients produced by [`partition_nid2`].
pub const NID2_CLIENTS: usize = 7;
/// Classes that get a dedicated single-class client under NID2.
pub const NID2_BIASED: usize = 6;

const NID1_MAX_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    domains: Option<Vec<usize>>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, domains: Option<Vec<usize>>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(FedError::shape("LabeledDataset", features.rows(), labels.len()));
        }
        if let Some(d) = &domains {
            if d.len() != labels.len() {
                return Err(FedError::shape("LabeledDataset domains", labels.len(), d.len()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(FedError::LabelOutOfRange { label: bad, classes });
        }
        if !features.is_finite() {
            return Err(FedError::NonFinite("dataset features".into()));
        }
        Ok(LabeledDataset {
            features,
            labels,
            domains,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn in_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domains(&self) -> Option<&[usize]> {
        self.domains.as_deref()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn y(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn domain(&self, i: usize) -> Option<usize> {
        self.domains.as_ref().map(|d| d[i])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Sample indices grouped by class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let cols = self.features.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        LabeledDataset {
            features: Matrix::from_vec(indices.len(), cols, data).expect("row-sized chunks"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domains: self.domains.as_ref().map(|d| indices.iter().map(|&i| d[i]).collect()),
            classes: self.classes,
        }
    }

    /// Concatenates datasets sharing class count and feature width. Domain ids
    /// are kept only when every part has them.
    pub fn concat(parts: &[LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts.first().ok_or(FedError::Empty("concat"))?;
        let cols = first.in_dim();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let keep_domains = parts.iter().all(|p| p.domains.is_some());
        let mut domains = Vec::new();
        for p in parts {
            if p.in_dim() != cols || p.classes != first.classes {
                return Err(FedError::shape("concat", cols, p.in_dim()));
            }
            data.extend_from_slice(p.features.as_slice());
            labels.extend_from_slice(&p.labels);
            if keep_domains {
                domains.extend_from_slice(p.domains.as_ref().unwrap());
            }
        }
        let rows = labels.len();
        LabeledDataset::new(
            Matrix::from_vec(rows, cols, data)?,
            labels,
            keep_domains.then_some(domains),
            first.classes,
        )
    }

    pub fn with_domain(mut self, domain_id: usize) -> LabeledDataset {
        self.domains = Some(vec![domain_id; self.labels.len()]);
        self
    }
}

/// Isotropic Gaussian class clusters around means drawn once per run.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobGenerator {
    means: Matrix,
}

impl BlobGenerator {
    /// Class means ~ N(0, mean_scale²·I).
    pub fn new(classes: usize, in_dim: usize, mean_scale: f64, rng: &mut SimRng) -> Result<Self> {
        if classes < 2 {
            return Err(FedError::InvalidConfig("blobs need C >= 2".into()));
        }
        if in_dim == 0 {
            return Err(FedError::InvalidConfig("blobs need in_dim >= 1".into()));
        }
        loop {
            let data = rng.normal_vec(classes * in_dim, mean_scale);
            let means = Matrix::from_vec(classes, in_dim, data)?;
            let distinct = (0..classes).all(|a| (a + 1..classes).all(|b| means.row(a) != means.row(b)));
            if distinct {
                return Ok(BlobGenerator { means });
            }
        }
    }

    pub fn from_means(means: Matrix) -> Self {
        BlobGenerator { means }
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn classes(&self) -> usize {
        self.means.rows()
    }

    /// `per_class_n` samples of every class, class-major order.
    pub fn sample(&self, per_class_n: usize, spread: f64, rng: &mut SimRng) -> Result<LabeledDataset> {
        if per_class_n == 0 {
            return Err(FedError::InvalidConfig("per_class_n must be >= 1".into()));
        }
        let (classes, in_dim) = self.means.shape();
        let mut data = Vec::with_capacity(classes * per_class_n * in_dim);
        let mut labels = Vec::with_capacity(classes * per_class_n);
        for c in 0..classes {
            for _ in 0..per_class_n {
                for &m in self.means.row(c) {
                    data.push(m + spread * rng.standard_normal());
                }
                labels.push(c);
            }
        }
        LabeledDataset::new(Matrix::from_vec(labels.len(), in_dim, data)?, labels, None, classes)
    }
}

/// Convenience wrapper: fresh class means (unit scale) then one sample draw.
pub fn generate_blobs(
    classes: usize,
    per_class_n: usize,
    in_dim: usize,
    spread: f64,
    rng: &mut SimRng,
) -> Result<LabeledDataset> {
    BlobGenerator::new(classes, in_dim, 1.0, rng)?.sample(per_class_n, spread, rng)
}

/// `x ↦ Q·x + t` with `Q` orthogonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    pub rotation: Matrix,
    pub shift: Vec<f64>,
}

impl DomainTransform {
    pub fn identity(dim: usize) -> Self {
        DomainTransform {
            rotation: Matrix::identity(dim),
            shift: vec![0.0; dim],
        }
    }

    pub fn translation(shift: Vec<f64>) -> Self {
        DomainTransform {
            rotation: Matrix::identity(shift.len()),
            shift,
        }
    }

    /// Haar-ish random orthogonal matrix (Gram–Schmidt on a Gaussian matrix)
    /// plus a Gaussian shift of scale `shift_scale`.
    pub fn random(dim: usize, shift_scale: f64, rng: &mut SimRng) -> Self {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while rows.len() < dim {
            let mut v = rng.normal_vec(dim, 1.0);
            for r in &rows {
                let p = dot(&v, r);
                axpy(-p, r, &mut v);
            }
            let n = norm(&v);
            if n > 1e-8 {
                v.iter_mut().for_each(|x| *x /= n);
                rows.push(v);
            }
        }
        DomainTransform {
            rotation: Matrix::from_rows(&rows).expect("square"),
            shift: rng.normal_vec(dim, shift_scale),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.rotation.matvec(x)?;
        axpy(1.0, &self.shift, &mut y);
        Ok(y)
    }
}

/// Maps every feature row through `transform` and tags samples with `domain_id`.
pub fn apply_domain_transform(
    ds: &LabeledDataset,
    domain_id: usize,
    transform: &DomainTransform,
) -> Result<LabeledDataset> {
    if transform.shift.len() != ds.in_dim() {
        return Err(FedError::shape(
            "apply_domain_transform",
            ds.in_dim(),
            transform.shift.len(),
        ));
    }
    let mut data = Vec::with_capacity(ds.features.as_slice().len());
    for row in ds.features.row_iter() {
        data.extend(transform.apply(row)?);
    }
    LabeledDataset::new(
        Matrix::from_vec(ds.len(), ds.in_dim(), data)?,
        ds.labels.clone(),
        Some(vec![domain_id; ds.len()]),
        ds.classes,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionSpec {
    Nid1 { alpha: f64 },
    Nid2,
    LongTail { rho: f64, alpha: f64 },
    DomainSkew { domains: usize, assignment: Vec<usize> },
}

impl PartitionSpec {
    pub fn validate(&self, clients: usize) -> Result<()> {
        if clients == 0 {
            return Err(FedError::InvalidConfig("K must be >= 1".into()));
        }
        match self {
            PartitionSpec::Nid1 { alpha } if !(*alpha > 0.0) => {
                Err(FedError::InvalidConfig(format!("alpha must be > 0, got {alpha}")))
            }
            PartitionSpec::LongTail { rho, alpha } if !(*rho >= 1.0) || !(*alpha > 0.0) => Err(
                FedError::InvalidConfig(format!("need rho >= 1 and alpha > 0, got {rho}, {alpha}")),
            ),
            PartitionSpec::DomainSkew { domains, assignment } => {
                if *domains == 0 || assignment.len() != clients {
                    return Err(FedError::InvalidConfig(format!(
                        "domain assignment needs {clients} entries over {domains} domains"
                    )));
                }
                if let Some(bad) = assignment.iter().find(|&&d| d >= *domains) {
                    return Err(FedError::InvalidConfig(format!("domain id {bad} out of range")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Round-robin client → domain map.
pub fn uniform_domain_assignment(clients: usize, domains: usize) -> Vec<usize> {
    (0..clients).map(|k| k % domains.max(1)).collect()
}

fn dirichlet(k: usize, alpha: f64, rng: &mut SimRng) -> Result<Vec<f64>> {
    loop {
        let draws = (0..k).map(|_| rng.gamma(alpha)).collect::<Result<Vec<f64>>>()?;
        let s: f64 = draws.iter().sum();
        if s > 0.0 && s.is_finite() {
            return Ok(draws.into_iter().map(|g| g / s).collect());
        }
    }
}

/// Label skew: every class is split across clients by Dirichlet(α·𝟙) proportions.
pub fn partition_nid1(
    ds: &LabeledDataset,
    clients: usize,
    alpha: f64,
    rng: &mut SimRng,
) -> Result<Vec<LabeledDataset>> {
    PartitionSpec::Nid1 { alpha }.validate(clients)?;
    if ds.is_empty() {
        return Err(FedError::Empty("partition_nid1"));
    }
    for _ in 0..NID1_MAX_ATTEMPTS {
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for mut idx in ds.indices_by_class() {
            if idx.is_empty() {
                continue;
            }
            rng.shuffle(&mut idx);
            let props = dirichlet(clients, alpha, rng)?;
            let n = idx.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (k, p) in props.iter().enumerate() {
                cum += p;
                let end = if k + 1 == clients {
                    n
                } else {
                    ((cum * n as f64).round() as usize).clamp(start, n)
                };
                assigned[k].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            return Ok(assigned
                .into_iter()
                .map(|mut a| {
                    a.sort_unstable();
                    ds.subset(&a)
                })
                .collect());
        }
    }
    Err(FedError::Partition(format!(
        "a client stayed empty after {NID1_MAX_ATTEMPTS} Dirichlet draws (alpha={alpha}, K={clients})"
    )))
}

/// Six single-class clients (classes 0..5, half of each class) plus one
/// client with everything else.
pub fn partition_nid2(ds: &LabeledDataset, rng: &mut SimRng) -> Result<Vec<LabeledDataset>> {
    if ds.classes() < NID2_BIASED {
        return Err(FedError::InvalidConfig(format!(
            "NID2 needs at least {NID2_BIASED} classes, got {}",
            ds.classes()
        )));
    }
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); NID2_CLIENTS];
    for (c, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        rng.shuffle(&mut idx);
        if c < NID2_BIASED {
            let half = idx.len() / 2;
            parts[c].extend_from_slice(&idx[..half]);
            parts[NID2_CLIENTS - 1].extend_from_slice(&idx[half..]);
        } else {
            parts[NID2_CLIENTS - 1].extend_from_slice(&idx);
        }
    }
    if let Some(k) = parts.iter().position(Vec::is_empty) {
        return Err(FedError::Partition(format!("NID2 client {k} is empty")));
    }
    Ok(parts
        .into_iter()
        .map(|mut p| {
            p.sort_unstable();
            ds.subset(&p)
        })
        .collect())
}

/// Uniform random split into `clients` near-equal shares.
pub fn partition_iid(ds: &LabeledDataset, clients: usize, rng: &mut SimRng) -> Result<Vec<LabeledDataset>> {
    if clients == 0 || ds.len() < clients {
        return Err(FedError::Partition(format!(
            "cannot split {} samples across {clients} clients",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut idx);
    let n = idx.len();
    Ok((0..clients)
        .map(|k| {
            let mut part = idx[k * n / clients..(k + 1) * n / clients].to_vec();
            part.sort_unstable();
            ds.subset(&part)
        })
        .collect())
}

/// Per-class sample budget of the exponential long-tail profile.
pub fn longtail_counts(classes: usize, n_max: usize, rho: f64) -> Vec<usize> {
    if classes < 2 {
        return vec![n_max; classes];
    }
    (0..classes)
        .map(|c| {
            let frac = rho.powf(-(c as f64) / (classes - 1) as f64);
            // guard against 4.999999… flooring to 4
            (n_max as f64 * frac + 1e-9).floor() as usize
        })
        .collect()
}

/// Keeps the first `⌊n_max·ρ^(−c/(C−1))⌋` samples of class `c`.
pub fn make_longtail(ds: &LabeledDataset, rho: f64) -> Result<LabeledDataset> {
    if !(rho >= 1.0) {
        return Err(FedError::InvalidConfig(format!("rho must be >= 1, got {rho}")));
    }
    let by_class = ds.indices_by_class();
    let n_max = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let budget = longtail_counts(ds.classes(), n_max, rho);
    let mut keep = Vec::new();
    for (c, idx) in by_class.iter().enumerate() {
        let k = budget[c].min(idx.len());
        if k == 0 {
            return Err(FedError::Partition(format!(
                "long-tail ratio {rho} leaves class {c} empty"
            )));
        }
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

fn csv_err(path: &Path, line: u64, msg: impl ToString) -> FedError {
    FedError::Csv {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    }
}

/// Reads `f0,…,f{n-1},label[,domain]`. Line numbers in errors are 1-based and
/// count the header.
pub fn load_csv(path: &Path, classes: usize) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|e| FedError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers().map_err(|e| csv_err(path, 1, e))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(csv_err(path, 1, "empty file"));
    }
    let has_domain = headers.iter().next_back() == Some("domain");
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| csv_err(path, 1, "missing 'label' column"))?;
    let expected_label_col = headers.len() - 1 - usize::from(has_domain);
    if label_col != expected_label_col || label_col == 0 {
        return Err(csv_err(path, 1, "expected columns f0..f{n-1},label[,domain]"));
    }
    for (j, h) in headers.iter().take(label_col).enumerate() {
        if h != format!("f{j}") {
            return Err(csv_err(path, 1, format!("column {j} should be 'f{j}', found '{h}'")));
        }
    }
    let in_dim = label_col;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_err(path, line, e))?;
        if rec.len() != headers.len() {
            return Err(csv_err(
                path,
                line,
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        for j in 0..in_dim {
            let v: f64 = rec[j]
                .trim()
                .parse()
                .map_err(|_| csv_err(path, line, format!("bad number '{}'", &rec[j])))?;
            if !v.is_finite() {
                return Err(csv_err(path, line, "non-finite feature"));
            }
            data.push(v);
        }
        let y: usize = rec[label_col]
            .trim()
            .parse()
            .map_err(|_| csv_err(path, line, format!("bad label '{}'", &rec[label_col])))?;
        if y >= classes {
            return Err(csv_err(path, line, format!("label {y} >= {classes} classes")));
        }
        labels.push(y);
        if has_domain {
            let d: usize = rec[label_col + 1]
                .trim()
                .parse()
                .map_err(|_| csv_err(path, line, "bad domain id"))?;
            domains.push(d);
        }
    }
    if labels.is_empty() {
        return Err(csv_err(path, 1, "no data rows"));
    }
    LabeledDataset::new(
        Matrix::from_vec(labels.len(), in_dim, data)?,
        labels,
        has_domain.then_some(domains),
        classes,
    )
}

/// Writes the format read by [`load_csv`], floats with 17 significant digits.
pub fn write_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..ds.in_dim())
        .map(|j| format!("f{j}"))
        .chain(std::iter::once("label".to_string()))
        .chain(ds.domains.is_some().then(|| "domain".to_string()))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds.x(i).iter().map(|v| format!("{v:.16e}")).collect();
        fields.push(ds.y(i).to_string());
        if let Some(d) = ds.domain(i) {
            fields.push(d.to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| FedError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| FedError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_keys(ds: &LabeledDataset) -> Vec<(Vec<u64>, usize)> {
        let mut keys: Vec<_> = (0..ds.len())
            .map(|i| (ds.x(i).iter().map(|v| v.to_bits()).collect(), ds.y(i)))
            .collect();
        keys.sort();
        keys
    }

    fn union_keys(parts: &[LabeledDataset]) -> Vec<(Vec<u64>, usize)> {
        let mut all: Vec<_> = parts.iter().flat_map(sample_keys).collect();
        all.sort();
        all
    }

    fn blobs(classes: usize, n: usize, seed: u64) -> LabeledDataset {
        generate_blobs(classes, n, 4, 1.0, &mut SimRng::new(seed, 0)).unwrap()
    }

    #[test]
    fn zero_spread_blobs_sit_on_means() {
        let mut rng = SimRng::new(1, 0);
        let g = BlobGenerator::new(3, 4, 1.0, &mut rng).unwrap();
        let ds = g.sample(5, 0.0, &mut rng).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.x(i), g.means().row(ds.y(i)));
        }
    }

    #[test]
    fn blob_counts_and_determinism() {
        let ds = blobs(2, 10, 3);
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.class_counts(), vec![10, 10]);
        assert_eq!(ds, blobs(2, 10, 3));
    }

    #[test]
    fn identity_and_translation_domains() {
        let ds = blobs(3, 4, 8);
        let same = apply_domain_transform(&ds, 0, &DomainTransform::identity(4)).unwrap();
        assert_eq!(same.features(), ds.features());
        assert_eq!(same.domains().unwrap(), &[0; 12][..]);

        let t = vec![1.0, -2.0, 0.5, 3.0];
        let moved = apply_domain_transform(&ds, 1, &DomainTransform::translation(t.clone())).unwrap();
        for i in 0..ds.len() {
            for j in 0..4 {
                assert_eq!(moved.x(i)[j], ds.x(i)[j] + t[j]);
            }
        }
        assert_eq!(moved.labels(), ds.labels());
    }

    #[test]
    fn domain_class_means_follow_the_relative_map() {
        let ds = blobs(3, 50, 12);
        let mut rng = SimRng::new(12, 9);
        let ta = DomainTransform::random(4, 1.0, &mut rng);
        let tb = DomainTransform::random(4, 1.0, &mut rng);
        let a = apply_domain_transform(&ds, 0, &ta).unwrap();
        let b = apply_domain_transform(&ds, 1, &tb).unwrap();
        let mean_of = |d: &LabeledDataset, c: usize| -> Vec<f64> {
            let idx = &d.indices_by_class()[c];
            let mut m = vec![0.0; 4];
            for &i in idx {
                axpy(1.0 / idx.len() as f64, d.x(i), &mut m);
            }
            m
        };
        for c in 0..3 {
            // b = Qb·Qaᵀ·(a − ta) + tb, applied to the class mean.
            let ma = mean_of(&a, c);
            let base: Vec<f64> = ta.rotation.t_matvec(&crate::numerics::sub(&ma, &ta.shift)).unwrap();
            let predicted = tb.apply(&base).unwrap();
            let mb = mean_of(&b, c);
            for (p, m) in predicted.iter().zip(&mb) {
                assert!((p - m).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn random_rotation_is_orthogonal() {
        let t = DomainTransform::random(5, 0.0, &mut SimRng::new(2, 2));
        for i in 0..5 {
            for j in 0..5 {
                let d = dot(t.rotation.row(i), t.rotation.row(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nid1_conserves_and_is_deterministic() {
        let ds = blobs(5, 40, 4);
        let parts = partition_nid1(&ds, 6, 0.5, &mut SimRng::new(4, 1)).unwrap();
        assert_eq!(parts.len(), 6);
        assert!(parts.iter().all(|p| !p.is_empty()));
        assert_eq!(union_keys(&parts), sample_keys(&ds));
        let again = partition_nid1(&ds, 6, 0.5, &mut SimRng::new(4, 1)).unwrap();
        assert_eq!(parts, again);
    }

    #[test]
    fn nid1_single_client_gets_everything() {
        let ds = blobs(3, 7, 5);
        let parts = partition_nid1(&ds, 1, 0.3, &mut SimRng::new(0, 0)).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], ds);
    }

    #[test]
    fn nid1_large_alpha_is_near_uniform() {
        let ds = blobs(4, 1000, 6);
        let k = 5;
        let parts = partition_nid1(&ds, k, 1e6, &mut SimRng::new(6, 0)).unwrap();
        for p in &parts {
            for count in p.class_counts() {
                let share = count as f64 / 1000.0;
                assert!((share - 1.0 / k as f64).abs() < 0.05 * (1.0 / k as f64));
            }
        }
    }

    #[test]
    fn nid1_rejects_bad_alpha() {
        let ds = blobs(3, 5, 1);
        assert!(partition_nid1(&ds, 2, 0.0, &mut SimRng::new(0, 0)).is_err());
    }

    #[test]
    fn nid1_fails_when_clients_cannot_all_be_fed() {
        let ds = blobs(2, 1, 1);
        assert!(matches!(
            partition_nid1(&ds, 5, 0.1, &mut SimRng::new(0, 0)),
            Err(FedError::Partition(_))
        ));
    }

    #[test]
    fn nid2_structure() {
        let ds = blobs(10, 20, 7);
        let parts = partition_nid2(&ds, &mut SimRng::new(7, 0)).unwrap();
        assert_eq!(parts.len(), 7);
        for (c, p) in parts.iter().take(6).enumerate() {
            assert!(p.labels().iter().all(|&y| y == c));
            assert_eq!(p.len(), 10);
        }
        assert!(parts[6].class_counts().iter().all(|&n| n >= 1));
        assert_eq!(union_keys(&parts), sample_keys(&ds));
    }

    #[test]
    fn nid2_needs_six_classes() {
        let ds = blobs(5, 4, 1);
        assert!(partition_nid2(&ds, &mut SimRng::new(0, 0)).is_err());
    }

    #[test]
    fn longtail_fixtures() {
        assert_eq!(longtail_counts(10, 500, 100.0)[0], 500);
        assert_eq!(longtail_counts(10, 500, 100.0)[9], 5);
        let ds = blobs(10, 500, 2);
        let lt = make_longtail(&ds, 100.0).unwrap();
        let counts = lt.class_counts();
        assert_eq!(counts[0], 500);
        assert_eq!(counts[9], 5);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(make_longtail(&ds, 1.0).unwrap(), ds);
    }

    #[test]
    fn longtail_ratio_bounds() {
        for rho in [2.0, 10.0, 37.5, 50.0, 100.0] {
            let counts = longtail_counts(10, 400, rho);
            let n_min = counts[9] as f64;
            let ratio = counts[0] as f64 / n_min;
            assert!(ratio >= rho * (1.0 - 2.0 / n_min) && ratio <= rho * (1.0 + 2.0 / n_min));
        }
    }

    #[test]
    fn longtail_emptying_a_class_is_error() {
        let ds = blobs(3, 4, 2);
        assert!(make_longtail(&ds, 100.0).is_err());
        assert!(make_longtail(&ds, 0.5).is_err());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let ds = apply_domain_transform(&blobs(3, 5, 9), 2, &DomainTransform::identity(4)).unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&ds, &path).unwrap();
        assert_eq!(load_csv(&path, 3).unwrap(), ds);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(load_csv(&empty, 3).is_err());

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "f0,f1,label\n1.0,2.0,0\n1.0,oops,1\n").unwrap();
        match load_csv(&bad, 3) {
            Err(FedError::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }

        let big = dir.path().join("big.csv");
        std::fs::write(&big, "f0,label\n1.0,5\n").unwrap();
        assert!(matches!(load_csv(&big, 3), Err(FedError::Csv { line: 2, .. })));
    }
}
