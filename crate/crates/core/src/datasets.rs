//! Labelled feature vectors, synthetic benchmarks and CSV I/O.
//!
//! The synthetic benchmark is a Gaussian mixture with one isotropic
//! component per ID class. Near-OOD data sits on the midpoints between
//! adjacent class means (same spread), far-OOD data on a distant shell.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{ensure_finite, Matrix, RngState};

/// Label carried by every OOD example.
pub const OOD_LABEL: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    IdTrain,
    IdVal,
    IdTest,
    NearOod,
    FarOod,
}

impl Role {
    pub fn is_id(self) -> bool {
        matches!(self, Role::IdTrain | Role::IdVal | Role::IdTest)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::IdTrain => "id_train",
            Role::IdVal => "id_val",
            Role::IdTest => "id_test",
            Role::NearOod => "near_ood",
            Role::FarOod => "far_ood",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    role: Role,
    dim: usize,
    classes: usize,
    examples: Vec<Example>,
}

impl Dataset {
    /// Validates dimensions, finiteness and role/label agreement.
    pub fn new(role: Role, dim: usize, classes: usize, examples: Vec<Example>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("feature dimension must be at least 1"));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.x.len() != dim {
                return Err(invalid(format!(
                    "example {i} has dimension {}, expected {dim}",
                    ex.x.len()
                )));
            }
            ensure_finite(&ex.x, "example features")?;
            check_label(role, classes, ex.y).map_err(|m| invalid(format!("example {i}: {m}")))?;
        }
        Ok(Dataset {
            role,
            dim,
            classes,
            examples,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of ID classes this dataset's labels refer to.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn labels(&self) -> Vec<i64> {
        self.examples.iter().map(|e| e.y).collect()
    }

    /// Features stacked as an `n × d` matrix.
    pub fn features(&self) -> Matrix {
        let data = self.examples.iter().flat_map(|e| e.x.iter().copied()).collect();
        Matrix::from_vec(self.examples.len(), self.dim, data).expect("validated on construction")
    }

    /// Same examples under a different role; labels are re-validated.
    pub fn with_role(self, role: Role) -> Result<Self> {
        Dataset::new(role, self.dim, self.classes, self.examples)
    }

    pub fn subset(&self, indices: &[usize], role: Role) -> Result<Self> {
        let examples = indices.iter().map(|&i| self.examples[i].clone()).collect();
        Dataset::new(role, self.dim, self.classes, examples)
    }

    /// Writes `x0,...,x{d-1},y` with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        header.push("y".into());
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for ex in &self.examples {
            for v in &ex.x {
                // `{:?}` prints the shortest representation that round-trips.
                write!(w, "{v:?},").map_err(io)?;
            }
            writeln!(w, "{}", ex.y).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

fn check_label(role: Role, classes: usize, y: i64) -> std::result::Result<(), String> {
    if role.is_id() {
        if y < 0 || y as usize >= classes {
            return Err(format!("label {y} outside [0, {classes}) for role {}", role.as_str()));
        }
    } else if y != OOD_LABEL {
        return Err(format!("label {y} in OOD role {} (expected -1)", role.as_str()));
    }
    Ok(())
}

/// Isotropic Gaussian mixture: one mean per class, shared spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub per_class: usize,
}

impl MixtureSpec {
    /// `classes` means evenly spaced on a circle of `radius` in the first two
    /// coordinates; remaining coordinates are zero. Requires `dim ≥ 2`.
    pub fn on_circle(classes: usize, dim: usize, radius: f64, sigma: f64, per_class: usize) -> Result<Self> {
        if dim < 2 {
            return Err(invalid("circle layout needs at least two feature dimensions"));
        }
        let means = (0..classes)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                let mut m = vec![0.0; dim];
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
                m
            })
            .collect();
        let spec = MixtureSpec {
            means,
            sigma,
            per_class,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// `σ = 0` is accepted and yields examples exactly at the means.
    pub fn validate(&self) -> Result<()> {
        if self.means.len() < 2 {
            return Err(invalid("mixture needs at least two classes"));
        }
        let d = self.dim();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(invalid("class means must share a nonzero dimension"));
        }
        for m in &self.means {
            ensure_finite(m, "class mean")?;
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(invalid(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if self.per_class == 0 {
            return Err(invalid("per-class sample count must be at least 1"));
        }
        Ok(())
    }

    /// Largest Euclidean norm among the class means.
    pub fn max_mean_norm(&self) -> f64 {
        self.means
            .iter()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Inner radius of the far-OOD shell: `4·max‖μ‖ + 4σ`.
    pub fn far_shell_radius(&self) -> f64 {
        4.0 * self.max_mean_norm() + 4.0 * self.sigma
    }

    /// Pairs of adjacent classes by index: `(k, k+1)`, closed into a cycle
    /// when there are at least three classes.
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        let c = self.classes();
        let mut pairs: Vec<(usize, usize)> = (0..c - 1).map(|k| (k, k + 1)).collect();
        if c >= 3 {
            pairs.push((c - 1, 0));
        }
        pairs
    }

    pub fn near_ood_centers(&self) -> Vec<Vec<f64>> {
        self.adjacent_pairs()
            .into_iter()
            .map(|(a, b)| {
                self.means[a]
                    .iter()
                    .zip(&self.means[b])
                    .map(|(x, y)| 0.5 * (x + y))
                    .collect()
            })
            .collect()
    }
}

fn gaussian_around(center: &[f64], sigma: f64, rng: &mut RngState) -> Vec<f64> {
    center.iter().map(|&c| c + sigma * rng.normal()).collect()
}

/// `per_class` draws from `N(μ_k, σ²I)` for every class, grouped by class.
pub fn gen_id(spec: &MixtureSpec, rng: &mut RngState) -> Result<Dataset> {
    spec.validate()?;
    let mut examples = Vec::with_capacity(spec.classes() * spec.per_class);
    for (k, mean) in spec.means.iter().enumerate() {
        for _ in 0..spec.per_class {
            examples.push(Example {
                x: gaussian_around(mean, spec.sigma, rng),
                y: k as i64,
            });
        }
    }
    Dataset::new(Role::IdTrain, spec.dim(), spec.classes(), examples)
}

/// `m` draws centred on midpoints of adjacent class means (pair chosen uniformly).
pub fn gen_near_ood(spec: &MixtureSpec, m: usize, rng: &mut RngState) -> Result<Dataset> {
    spec.validate()?;
    if m == 0 {
        return Err(invalid("near-OOD sample count must be at least 1"));
    }
    let centers = spec.near_ood_centers();
    let examples = (0..m)
        .map(|_| {
            let c = &centers[rng.below(centers.len())];
            Example {
                x: gaussian_around(c, spec.sigma, rng),
                y: OOD_LABEL,
            }
        })
        .collect();
    Dataset::new(Role::NearOod, spec.dim(), spec.classes(), examples)
}

/// `m` draws with uniform direction and radius uniform in `[R, 2R]`, where
/// `R` is [`MixtureSpec::far_shell_radius`].
pub fn gen_far_ood(spec: &MixtureSpec, m: usize, rng: &mut RngState) -> Result<Dataset> {
    spec.validate()?;
    if m == 0 {
        return Err(invalid("far-OOD sample count must be at least 1"));
    }
    let inner = spec.far_shell_radius();
    if !(inner > 0.0) {
        return Err(invalid("far-OOD shell radius is zero (all means at the origin with sigma 0)"));
    }
    let d = spec.dim();
    let mut examples = Vec::with_capacity(m);
    while examples.len() < m {
        let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        let r = rng.uniform_range(inner, 2.0 * inner);
        examples.push(Example {
            x: dir.iter().map(|v| v / norm * r).collect(),
            y: OOD_LABEL,
        });
    }
    Dataset::new(Role::FarOod, d, spec.classes(), examples)
}

/// Reads a `x0,...,x{d-1},y` file. `classes` is the number of ID classes
/// labels refer to; pass `None` to infer it as `max(y) + 1`.
pub fn load_csv(path: &Path, role: Role, classes: Option<usize>) -> Result<Dataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, format!("{other:?}")),
        })?;

    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let dim = header.len().saturating_sub(1);
    if dim == 0 {
        return Err(parse_err(1, "header needs at least one feature column and y".into()));
    }
    for (i, name) in header.iter().enumerate() {
        let expected = if i == dim { "y".to_string() } else { format!("x{i}") };
        if name.trim() != expected {
            return Err(parse_err(1, format!("unknown header column {name:?}, expected {expected:?}")));
        }
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(parse_err(line, format!("expected {} fields, found {}", dim + 1, record.len())));
        }
        let mut x = Vec::with_capacity(dim);
        for (i, field) in record.iter().take(dim).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("x{i} is not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("x{i} is not finite")));
            }
            x.push(v);
        }
        let y_field = record.get(dim).unwrap_or_default().trim();
        let y: i64 = y_field
            .parse()
            .map_err(|_| parse_err(line, format!("label is not an integer: {y_field:?}")))?;
        if y < OOD_LABEL {
            return Err(parse_err(line, format!("label {y} is below -1")));
        }
        rows.push((line, Example { x, y }));
    }

    let classes = match classes {
        Some(c) => c,
        None => rows.iter().map(|(_, e)| e.y + 1).max().unwrap_or(0).max(0) as usize,
    };
    for (line, ex) in &rows {
        check_label(role, classes, ex.y).map_err(|m| parse_err(*line, m))?;
    }
    Dataset::new(role, dim, classes, rows.into_iter().map(|(_, e)| e).collect())
}

/// Seeded partition into `(id_train, id_val, id_test)`.
///
/// Validation and test sizes are `round(f·n)`; the remainder goes to train.
pub fn split(dataset: &Dataset, fractions: [f64; 3], rng: &mut RngState) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
        return Err(invalid("split fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions sum to {total}, not 1")));
    }
    let n = dataset.len();
    let n_val = (fractions[1] * n as f64).round() as usize;
    let n_test = (fractions[2] * n as f64).round() as usize;
    if n_val + n_test > n {
        return Err(invalid(format!("cannot split {n} examples with fractions {fractions:?}")));
    }
    let n_train = n - n_val - n_test;
    let perm = rng.permutation(n);
    let (train_idx, rest) = perm.split_at(n_train);
    let (val_idx, test_idx) = rest.split_at(n_val);
    Ok((
        dataset.subset(train_idx, Role::IdTrain)?,
        dataset.subset(val_idx, Role::IdVal)?,
        dataset.subset(test_idx, Role::IdTest)?,
    ))
}
