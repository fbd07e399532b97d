//! Kernel-skeleton diagnostics on fused models: the average kernel magnitude
//! matrix, location-wise pruning sweeps and accuracy under rotations / flips.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::exec::{map_indices, Exec};
use crate::train::accuracy;
use crate::{flip_ud, rot180, rot90, Error, Layer, Model, Real, Result, Tensor};

/// Named subsets of the nine positions of a 3x3 kernel, as `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LocationSet {
    Corner,
    Skeleton,
    Global,
    Border,
    TopLeft2x2,
}

impl LocationSet {
    pub const ALL: [LocationSet; 5] = [
        LocationSet::Corner,
        LocationSet::Skeleton,
        LocationSet::Global,
        LocationSet::Border,
        LocationSet::TopLeft2x2,
    ];

    pub fn positions(self) -> &'static [(usize, usize)] {
        match self {
            LocationSet::Corner => &[(0, 0), (0, 2), (2, 0), (2, 2)],
            LocationSet::Skeleton => &[(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)],
            LocationSet::Global => &[(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)],
            LocationSet::Border => &[(0, 2), (1, 2), (2, 0), (2, 1), (2, 2)],
            LocationSet::TopLeft2x2 => &[(0, 0), (0, 1), (1, 0), (1, 1)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LocationSet::Corner => "corner",
            LocationSet::Skeleton => "skeleton",
            LocationSet::Global => "global",
            LocationSet::Border => "border",
            LocationSet::TopLeft2x2 => "tl2x2",
        }
    }

    /// Largest reachable layer sparsity: the share of the kernel in the set.
    pub fn cap(self) -> f64 {
        self.positions().len() as f64 / 9.0
    }

    pub fn contains(self, row: usize, col: usize) -> bool {
        self.positions().contains(&(row, col))
    }
}

impl FromStr for LocationSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corner" | "corners" => Ok(LocationSet::Corner),
            "skeleton" => Ok(LocationSet::Skeleton),
            "global" => Ok(LocationSet::Global),
            "border" => Ok(LocationSet::Border),
            "tl2x2" | "top-left" => Ok(LocationSet::TopLeft2x2),
            other => Err(Error::Invalid(format!("unknown location set {other:?}"))),
        }
    }
}

impl fmt::Display for LocationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Layer average of per-layer max-normalized sums of absolute 3x3 weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeMatrix {
    pub a: [[f64; 3]; 3],
    pub layers: usize,
}

impl MagnitudeMatrix {
    pub fn mean_over(&self, set: LocationSet) -> f64 {
        let p = set.positions();
        p.iter().map(|&(r, c)| self.a[r][c]).sum::<f64>() / p.len() as f64
    }

    pub fn skeleton_mean(&self) -> f64 {
        self.mean_over(LocationSet::Skeleton)
    }

    pub fn corner_mean(&self) -> f64 {
        self.mean_over(LocationSet::Corner)
    }

    pub fn csv_header() -> &'static str {
        "layers,a00,a01,a02,a10,a11,a12,a20,a21,a22"
    }

    /// Layer count, then the nine entries row-major.
    pub fn csv_row(&self) -> String {
        let vals: Vec<String> = self.a.iter().flatten().map(|v| format!("{v:.6}")).collect();
        format!("{},{}", self.layers, vals.join(","))
    }
}

impl fmt::Display for MagnitudeMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.a {
            writeln!(f, "{:.3} {:.3} {:.3}", row[0], row[1], row[2])?;
        }
        Ok(())
    }
}

fn square_convs<T: Real>(model: &Model<T>) -> Result<Vec<usize>> {
    if model.has_acb() {
        return Err(Error::Invalid("model still has ACB layers; fuse it first".into()));
    }
    let idx: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Conv(c) if c.kernel() == (3, 3)))
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::Invalid("model has no 3x3 conv layers".into()));
    }
    Ok(idx)
}

/// `A = (1/L) sum_i S_i / max(S_i)` over the model's 3x3 conv layers, where
/// `S_i` sums the absolute kernel values of layer `i` over filters and input
/// channels.
pub fn magnitude_matrix<T: Real>(model: &Model<T>) -> Result<MagnitudeMatrix> {
    let convs = square_convs(model)?;
    let mut a = [[0.0f64; 3]; 3];
    for &i in &convs {
        let Layer::Conv(c) = &model.layers[i] else { unreachable!() };
        let mut s = [[0.0f64; 3]; 3];
        for k in c.weight.value.data().chunks_exact(9) {
            for (p, v) in k.iter().enumerate() {
                s[p / 3][p % 3] += v.as_f64().abs();
            }
        }
        let max = s.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
        if max <= 0.0 {
            return Err(Error::Layer {
                layer: i,
                msg: "all kernel weights are zero".into(),
            });
        }
        for r in 0..3 {
            for col in 0..3 {
                a[r][col] += s[r][col] / max / convs.len() as f64;
            }
        }
    }
    Ok(MagnitudeMatrix { a, layers: convs.len() })
}

/// Zeroes uniformly drawn weights at `set` positions of every 3x3 conv layer
/// until `target` of the layer's `9 c d` kernel weights are removed
/// (rounded to the nearest count).
pub fn prune_by_location<T: Real>(model: &Model<T>, set: LocationSet, target: f64, seed: u64) -> Result<Model<T>> {
    if target.is_nan() || target < 0.0 {
        return Err(Error::Invalid(format!("sparsity {target} is not a non-negative number")));
    }
    if target > set.cap() + 1e-9 {
        return Err(Error::InfeasibleSparsity {
            set: set.name(),
            target,
            cap: set.cap(),
        });
    }
    let convs = square_convs(model)?;
    let mut out = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells: Vec<usize> = set.positions().iter().map(|&(r, c)| r * 3 + c).collect();
    for i in convs {
        let Layer::Conv(c) = &mut out.layers[i] else { unreachable!() };
        let w = c.weight.value.data_mut();
        let kernels = w.len() / 9;
        let candidates = kernels * cells.len();
        let k = ((target * w.len() as f64).round() as usize).min(candidates);
        for pick in sample(&mut rng, candidates, k) {
            w[(pick / cells.len()) * 9 + cells[pick % cells.len()]] = T::zero();
        }
    }
    Ok(out)
}

/// `0, 5%, 10%, ..` up to the set's cap, with the cap itself as the last point.
pub fn default_grid(set: LocationSet) -> Vec<f64> {
    let mut g: Vec<f64> = (0..).map(|i| i as f64 * 0.05).take_while(|&s| s < set.cap() - 1e-9).collect();
    g.push(set.cap());
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub set: LocationSet,
    pub sparsity: f64,
    pub mean_acc: f64,
    /// Population standard deviation over seeds.
    pub std_acc: f64,
    pub runs: usize,
}

pub const SWEEP_CSV_HEADER: &str = "set,sparsity,mean_acc,std_acc";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        s += &format!("{},{:.6},{:.6},{:.6}\n", r.set, r.sparsity, r.mean_acc, r.std_acc);
    }
    s
}

/// Eval accuracy after [`prune_by_location`] for every set, sparsity and seed.
/// Seeds run in parallel under `exec`.
pub fn sparsity_sweep<T: Real>(
    model: &Model<T>,
    sets: &[LocationSet],
    grid: &[f64],
    seeds: &[u64],
    eval: &Dataset,
    exec: Exec,
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::Invalid("sparsity sweep needs at least one seed".into()));
    }
    for &set in sets {
        if let Some(&bad) = grid.iter().find(|&&s| s > set.cap() + 1e-9 || s < 0.0) {
            return Err(Error::InfeasibleSparsity {
                set: set.name(),
                target: bad,
                cap: set.cap(),
            });
        }
    }
    let mut rows = Vec::with_capacity(sets.len() * grid.len());
    for &set in sets {
        for &sparsity in grid {
            let accs = map_indices(exec, seeds.len(), |i| {
                prune_by_location(model, set, sparsity, seeds[i]).and_then(|m| accuracy(&m, eval))
            })
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            rows.push(SweepRow {
                set,
                sparsity,
                mean_acc: mean,
                std_acc: var.sqrt(),
                runs: accs.len(),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distortion {
    Identity,
    Rot90,
    Rot180,
    FlipUd,
}

impl Distortion {
    pub const ALL: [Distortion; 4] = [Distortion::Identity, Distortion::Rot90, Distortion::Rot180, Distortion::FlipUd];

    pub fn name(self) -> &'static str {
        match self {
            Distortion::Identity => "identity",
            Distortion::Rot90 => "rot90",
            Distortion::Rot180 => "rot180",
            Distortion::FlipUd => "flip_ud",
        }
    }

    pub fn apply<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Distortion::Identity => x.clone(),
            Distortion::Rot90 => rot90(x),
            Distortion::Rot180 => rot180(x),
            Distortion::FlipUd => flip_ud(x),
        }
    }
}

pub const DISTORTION_CSV_HEADER: &str = "transform,accuracy";

/// Accuracy with every eval image passed through each distortion.
pub fn distortion_eval<T: Real>(model: &Model<T>, eval: &Dataset) -> Result<Vec<(Distortion, f64)>> {
    Distortion::ALL
        .iter()
        .map(|&d| Ok((d, accuracy(model, &eval.map_images(|x| d.apply(x))?)?)))
        .collect()
}

pub fn distortion_csv(rows: &[(Distortion, f64)]) -> String {
    let mut s = format!("{DISTORTION_CSV_HEADER}\n");
    for (d, acc) in rows {
        s += &format!("{},{:.6}\n", d.name(), acc);
    }
    s
}
