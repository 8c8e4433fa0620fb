//! Parameter spaces, low-discrepancy designs and design sets.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior_model::AuxiliaryParameters;
use crate::series::TimeSeries;

/// A point in a [`ParameterSpace`], one coordinate per dimension.
pub type ParameterVector = Vec<f64>;

/// Prime bases used for the Halton coordinates, in dimension order.
pub const HALTON_PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Default overreach of the design hypercube relative to the calibration bounds.
pub const DEFAULT_OVERREACH: f64 = 1.05;

/// Default stretch factor applied to refinement batches.
pub const DEFAULT_STRETCH: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

impl Dimension {
    pub fn new(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
        }
    }

    pub fn span(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// Named calibration bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpace {
    dims: Vec<Dimension>,
}

impl ParameterSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::invalid("parameter space needs at least one dimension"));
        }
        let mut seen = HashSet::new();
        for d in &dims {
            if !(d.lower < d.upper) || !d.lower.is_finite() || !d.upper.is_finite() {
                return Err(Error::invalid(format!(
                    "dimension `{}`: lower bound {} must be below upper bound {}",
                    d.name, d.lower, d.upper
                )));
            }
            if !seen.insert(d.name.as_str()) {
                return Err(Error::invalid(format!("duplicate dimension name `{}`", d.name)));
            }
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.dims.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    /// Span of the calibration hypercube in each dimension.
    pub fn spans(&self) -> Vec<f64> {
        self.dims.iter().map(Dimension::span).collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.dims.iter().map(Dimension::center).collect()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dims.len() && point.iter().zip(&self.dims).all(|(&x, d)| x >= d.lower && x <= d.upper)
    }

    /// The hypercube with the same centers and half-widths scaled by `factor`.
    pub fn overreached(&self, factor: f64) -> ParameterSpace {
        let dims = self
            .dims
            .iter()
            .map(|d| {
                let half = 0.5 * d.span() * factor;
                Dimension::new(d.name.clone(), d.center() - half, d.center() + half)
            })
            .collect();
        ParameterSpace { dims }
    }

    /// Clamp each coordinate into the box.
    pub fn clip(&self, point: &mut [f64]) {
        for (x, d) in point.iter_mut().zip(&self.dims) {
            *x = x.clamp(d.lower, d.upper);
        }
    }
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 1;
    }
    true
}

/// Base-`base` radical inverse of `index`: its digits mirrored about the radix point.
pub fn radical_inverse(index: u64, base: u64) -> Result<f64> {
    if index < 1 {
        return Err(Error::invalid("radical inverse index must be at least 1"));
    }
    if !is_prime(base) {
        return Err(Error::invalid(format!("radical inverse base {base} is not a prime")));
    }
    let inv_base = 1.0 / base as f64;
    let mut factor = inv_base;
    let mut n = index;
    let mut result = 0.0;
    while n > 0 {
        result += (n % base) as f64 * factor;
        n /= base;
        factor *= inv_base;
    }
    Ok(result)
}

/// `count` Halton points in the unit hypercube of dimension `dims`.
///
/// Point `j` uses index `skip + j`; coordinate `d` uses the `d`-th prime base.
pub fn halton_points(count: usize, dims: usize, skip: u64) -> Result<Vec<ParameterVector>> {
    if count == 0 {
        return Err(Error::invalid("Halton point count must be at least 1"));
    }
    if dims == 0 {
        return Err(Error::invalid("Halton dimension must be at least 1"));
    }
    if dims > HALTON_PRIMES.len() {
        return Err(Error::Unsupported(format!(
            "Halton designs support at most {} dimensions, got {dims}",
            HALTON_PRIMES.len()
        )));
    }
    if skip == 0 {
        return Err(Error::invalid("Halton skip must be at least 1 (index 0 is the origin)"));
    }
    (0..count as u64)
        .map(|j| {
            HALTON_PRIMES[..dims]
                .iter()
                .map(|&b| radical_inverse(skip + j, b))
                .collect()
        })
        .collect()
}

/// Map unit-hypercube points onto `space`, overreached by `overreach`.
pub fn scale_to_box(
    points: &[ParameterVector],
    space: &ParameterSpace,
    overreach: f64,
) -> Result<Vec<ParameterVector>> {
    if !(overreach >= 1.0) {
        return Err(Error::invalid(format!("overreach must be at least 1, got {overreach}")));
    }
    let target = space.overreached(overreach);
    points
        .iter()
        .map(|u| {
            if u.len() != space.len() {
                return Err(Error::invalid(format!(
                    "point has {} coordinates, space has {}",
                    u.len(),
                    space.len()
                )));
            }
            Ok(u.iter()
                .zip(target.dims())
                .map(|(&x, d)| d.lower + x * d.span())
                .collect())
        })
        .collect()
}

/// Component-wise sample mean.
pub fn sample_mean(points: &[ParameterVector]) -> Vec<f64> {
    let dim = points[0].len();
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, &x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    let n = points.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Expand a sample about its mean: `mu + stretch * (x - mu)`.
pub fn stretch_sample(points: &[ParameterVector], stretch: f64) -> Result<Vec<ParameterVector>> {
    if points.is_empty() {
        return Err(Error::invalid("cannot stretch an empty sample"));
    }
    if !(stretch > 0.0) {
        return Err(Error::invalid(format!(
            "stretch factor must be positive, got {stretch}"
        )));
    }
    let mu = sample_mean(points);
    Ok(points
        .iter()
        .map(|p| p.iter().zip(&mu).map(|(&x, &m)| m + stretch * (x - m)).collect())
        .collect())
}

/// Where a design point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Halton,
    /// Added by refinement iteration `k` (1-based).
    Refinement(usize),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Halton => f.write_str("halton"),
            Origin::Refinement(k) => write!(f, "refine-{k}"),
        }
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "halton" {
            return Ok(Origin::Halton);
        }
        s.strip_prefix("refine-")
            .and_then(|k| k.parse().ok())
            .map(Origin::Refinement)
            .ok_or_else(|| Error::invalid(format!("unknown design origin `{s}`")))
    }
}

/// Auxiliary parameters as persisted next to a design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DesignMeta {
    k: f64,
    t0_s: f64,
    #[serde(rename = "A_m2")]
    a_m2: f64,
    gamma: f64,
    sigma: f64,
}

/// Simulator input-output pairs used to condition the emulator.
#[derive(Debug, Clone)]
pub struct DesignSet {
    space: ParameterSpace,
    overreach: f64,
    points: Vec<ParameterVector>,
    origins: Vec<Origin>,
    outputs: Vec<TimeSeries>,
}

impl DesignSet {
    pub fn new(space: ParameterSpace, overreach: f64) -> Self {
        Self {
            space,
            overreach,
            points: Vec::new(),
            origins: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Initial design: `count` Halton points on the overreached calibration box.
    pub fn halton(space: ParameterSpace, overreach: f64, count: usize, skip: u64) -> Result<Self> {
        let unit = halton_points(count, space.len(), skip)?;
        let points = scale_to_box(&unit, &space, overreach)?;
        let mut set = Self::new(space, overreach);
        for p in points {
            set.push_point(p, Origin::Halton)?;
        }
        Ok(set)
    }

    pub fn space(&self) -> &ParameterSpace {
        &self.space
    }

    pub fn overreach(&self) -> f64 {
        self.overreach
    }

    /// The box every design point must lie in.
    pub fn design_box(&self) -> ParameterSpace {
        self.space.overreached(self.overreach)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[ParameterVector] {
        &self.points
    }

    pub fn origins(&self) -> &[Origin] {
        &self.origins
    }

    pub fn outputs(&self) -> &[TimeSeries] {
        &self.outputs
    }

    pub fn has_outputs(&self) -> bool {
        !self.points.is_empty() && self.outputs.len() == self.points.len()
    }

    fn check_point(&self, point: &[f64]) -> Result<()> {
        let bx = self.design_box();
        // allow round-off at the faces of the box
        let tol = 1e-12;
        let inside = point.len() == bx.len()
            && point.iter().zip(bx.dims()).all(|(&x, d)| {
                let slack = tol * d.span();
                x >= d.lower - slack && x <= d.upper + slack
            });
        if inside {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "design point {point:?} lies outside the overreached hypercube"
            )))
        }
    }

    /// Append a point without an output (outputs are attached later in order).
    pub fn push_point(&mut self, point: ParameterVector, origin: Origin) -> Result<()> {
        if self.outputs.len() != self.points.len() && !self.outputs.is_empty() {
            return Err(Error::invalid("cannot mix points with and without outputs"));
        }
        self.check_point(&point)?;
        self.points.push(point);
        self.origins.push(origin);
        Ok(())
    }

    /// Append a point together with its simulator output.
    pub fn push(&mut self, point: ParameterVector, origin: Origin, output: TimeSeries) -> Result<()> {
        if self.outputs.len() != self.points.len() {
            return Err(Error::invalid("design has points without outputs"));
        }
        if let Some(first) = self.outputs.first() {
            first.check_same_grid(&output, "design output")?;
        }
        self.check_point(&point)?;
        self.points.push(point);
        self.origins.push(origin);
        self.outputs.push(output);
        Ok(())
    }

    /// Attach outputs to all points at once (same order as the points).
    pub fn set_outputs(&mut self, outputs: Vec<TimeSeries>) -> Result<()> {
        if outputs.len() != self.points.len() {
            return Err(Error::invalid(format!(
                "{} outputs for {} design points",
                outputs.len(),
                self.points.len()
            )));
        }
        if let Some(first) = outputs.first() {
            for o in &outputs[1..] {
                first.check_same_grid(o, "design output")?;
            }
        }
        self.outputs = outputs;
        Ok(())
    }

    /// The first `n` entries as a design of their own.
    pub fn prefix(&self, n: usize) -> DesignSet {
        DesignSet {
            space: self.space.clone(),
            overreach: self.overreach,
            points: self.points[..n].to_vec(),
            origins: self.origins[..n].to_vec(),
            outputs: self.outputs[..n.min(self.outputs.len())].to_vec(),
        }
    }

    pub fn design_csv(&self) -> String {
        let mut out = String::from("index");
        for name in self.space.names() {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",origin\n");
        for (i, (p, o)) in self.points.iter().zip(&self.origins).enumerate() {
            out.push_str(&i.to_string());
            for x in p {
                out.push(',');
                out.push_str(&x.to_string());
            }
            out.push(',');
            out.push_str(&o.to_string());
            out.push('\n');
        }
        out
    }

    /// Persist as `design.csv`, `outputs/<index>.csv` and optionally `meta.json`.
    pub fn save(&self, dir: impl AsRef<Path>, aux: Option<&AuxiliaryParameters>) -> Result<()> {
        let dir = dir.as_ref();
        let outputs_dir = dir.join("outputs");
        fs::create_dir_all(&outputs_dir).map_err(|e| Error::io(&outputs_dir, e))?;
        let design_path = dir.join("design.csv");
        fs::write(&design_path, self.design_csv()).map_err(|e| Error::io(&design_path, e))?;
        for (i, out) in self.outputs.iter().enumerate() {
            out.write_csv(outputs_dir.join(format!("{i}.csv")))?;
        }
        if let Some(aux) = aux {
            let meta = DesignMeta {
                k: aux.k,
                t0_s: aux.t0,
                a_m2: aux.area,
                gamma: aux.gamma,
                sigma: aux.sigma,
            };
            let meta_path = dir.join("meta.json");
            let text = serde_json::to_string_pretty(&meta).expect("serialize meta");
            fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
        }
        Ok(())
    }

    /// Load a design directory written by [`DesignSet::save`].
    ///
    /// Column names in `design.csv` must match `space`.
    pub fn load(
        dir: impl AsRef<Path>,
        space: ParameterSpace,
        overreach: f64,
    ) -> Result<(DesignSet, Option<AuxiliaryParameters>)> {
        let dir = dir.as_ref();
        let design_path = dir.join("design.csv");
        let text = fs::read_to_string(&design_path).map_err(|e| Error::io(&design_path, e))?;
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| Error::parse(&design_path, e.to_string()))?
            .clone();
        let mut expected = vec!["index".to_string()];
        expected.extend(space.names().iter().map(|s| s.to_string()));
        expected.push("origin".into());
        let found: Vec<String> = headers.iter().map(str::to_string).collect();
        if found != expected {
            return Err(Error::parse(
                &design_path,
                format!("expected header `{}`, found `{}`", expected.join(","), found.join(",")),
            ));
        }
        let mut set = DesignSet::new(space, overreach);
        let mut outputs = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::parse(&design_path, e.to_string()))?;
            let bad = |m: String| Error::parse(&design_path, format!("row {}: {m}", row + 1));
            let index: usize = record[0].parse().map_err(|e| bad(format!("index: {e}")))?;
            if index != row {
                return Err(bad(format!("index {index} out of sequence")));
            }
            let point = (1..record.len() - 1)
                .map(|c| record[c].parse::<f64>().map_err(|e| bad(format!("column {c}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let origin: Origin = record[record.len() - 1].parse()?;
            set.push_point(point, origin)?;
            let out_path = dir.join("outputs").join(format!("{index}.csv"));
            if out_path.exists() {
                outputs.push(TimeSeries::read_csv(&out_path)?);
            }
        }
        if !outputs.is_empty() {
            set.set_outputs(outputs)?;
        }
        let meta_path = dir.join("meta.json");
        let aux = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let meta: DesignMeta = serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e.to_string()))?;
            Some(AuxiliaryParameters {
                k: meta.k,
                t0: meta.t0_s,
                area: meta.a_m2,
                gamma: meta.gamma,
                sigma: meta.sigma,
            })
        } else {
            None
        };
        Ok((set, aux))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_space(dims: usize) -> ParameterSpace {
        ParameterSpace::new((0..dims).map(|i| Dimension::new(format!("p{i}"), 0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn radical_inverse_examples() {
        assert_eq!(radical_inverse(1, 2).unwrap(), 0.5);
        assert_eq!(radical_inverse(3, 2).unwrap(), 0.75);
        assert!((radical_inverse(2, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(radical_inverse(1, 4).is_err());
        assert!(radical_inverse(1, 1).is_err());
        assert!(radical_inverse(0, 2).is_err());
    }

    #[test]
    fn halton_examples() {
        let pts = halton_points(2, 2, 1).unwrap();
        assert_eq!(pts[0][0], 0.5);
        assert!((pts[0][1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(pts[1][0], 0.25);
        assert!((pts[1][1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(halton_points(1, 1, 4).unwrap(), vec![vec![0.125]]);
        assert!(matches!(halton_points(4, 9, 1), Err(Error::Unsupported(_))));
    }

    #[test]
    fn scale_to_box_examples() {
        let space = ParameterSpace::new(vec![Dimension::new("a", 0.5, 1.5), Dimension::new("b", 1.0, 1.5)]).unwrap();
        let pts = scale_to_box(&[vec![0.0, 1.0], vec![0.5, 0.5]], &space, 1.05).unwrap();
        assert!((pts[0][0] - 0.475).abs() < 1e-12);
        assert!((pts[0][1] - 1.5125).abs() < 1e-12);
        assert!((pts[1][0] - 1.0).abs() < 1e-12);
        assert!((pts[1][1] - 1.25).abs() < 1e-12);
        assert!(scale_to_box(&pts, &space, 0.9).is_err());
    }

    #[test]
    fn stretch_examples() {
        let out = stretch_sample(&[vec![0.0], vec![2.0]], 1.1).unwrap();
        assert!((out[0][0] + 0.1).abs() < 1e-12);
        assert!((out[1][0] - 2.1).abs() < 1e-12);
        let same = stretch_sample(&[vec![0.3, 1.0], vec![2.0, -1.0]], 1.0).unwrap();
        for (a, b) in same.iter().flatten().zip([0.3, 1.0, 2.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(stretch_sample(&[], 1.1).is_err());
        assert!(stretch_sample(&[vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn space_validation() {
        assert!(ParameterSpace::new(vec![Dimension::new("a", 1.0, 1.0)]).is_err());
        assert!(ParameterSpace::new(vec![Dimension::new("a", 0.0, 1.0), Dimension::new("a", 0.0, 2.0)]).is_err());
    }

    #[test]
    fn origin_round_trip() {
        for o in [Origin::Halton, Origin::Refinement(3)] {
            assert_eq!(o.to_string().parse::<Origin>().unwrap(), o);
        }
        assert!("foo".parse::<Origin>().is_err());
    }

    #[test]
    fn design_rejects_points_outside_box() {
        let mut set = DesignSet::new(unit_space(1), 1.05);
        assert!(set.push_point(vec![1.02], Origin::Halton).is_ok());
        assert!(set.push_point(vec![1.1], Origin::Halton).is_err());
    }

    #[test]
    fn design_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = DesignSet::halton(unit_space(2), 1.05, 4, 1).unwrap();
        let outs = (0..4)
            .map(|i| TimeSeries::new(0.0, 60.0, vec![i as f64, 0.5]).unwrap())
            .collect();
        set.set_outputs(outs).unwrap();
        let aux = AuxiliaryParameters {
            k: 0.02,
            t0: 30.0,
            area: 1.0e6,
            gamma: 5.0,
            sigma: 1e-5,
        };
        set.save(dir.path(), Some(&aux)).unwrap();
        let (back, back_aux) = DesignSet::load(dir.path(), unit_space(2), 1.05).unwrap();
        assert_eq!(back.points(), set.points());
        assert_eq!(back.outputs(), set.outputs());
        assert_eq!(back_aux, Some(aux));
        let meta = fs::read_to_string(dir.path().join("meta.json")).unwrap();
        for key in ["\"k\"", "\"t0_s\"", "\"A_m2\"", "\"gamma\"", "\"sigma\""] {
            assert!(meta.contains(key), "{meta}");
        }
        assert!(set.design_csv().starts_with("index,p0,p1,origin\n0,"));
    }
}
