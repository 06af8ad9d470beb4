//! Array geometry, polar source coordinates, microphone pairs and query regions.
//!
//! Frame convention: the array frame is centered on the array, `+x` is azimuth 0,
//! azimuth grows counter-clockwise towards `+y`, and elevation is measured from the
//! `xy` plane towards `+z`.

use std::fmt;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Minimum separation between two microphones.
pub const MIN_MIC_SEPARATION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayLayout {
    Circular,
    Linear,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicArray {
    positions: Vec<[f64; 3]>,
    layout: ArrayLayout,
}

impl MicArray {
    pub fn new(positions: Vec<Point3>, layout: ArrayLayout) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::Geometry(format!(
                "array needs at least 2 microphones, got {}",
                positions.len()
            )));
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Geometry(format!("microphone {i} has a non-finite position")));
            }
        }
        for i in 0..positions.len() {
            for j in i + 1..positions.len() {
                if (positions[i] - positions[j]).norm() <= MIN_MIC_SEPARATION {
                    return Err(Error::Geometry(format!("microphones {i} and {j} coincide")));
                }
            }
        }
        Ok(Self {
            positions: positions.iter().map(|p| [p.x, p.y, p.z]).collect(),
            layout,
        })
    }

    /// `n` microphones on a horizontal circle; microphone 0 sits on the `+x` axis.
    pub fn circular(n: usize, diameter: f64) -> Result<Self> {
        if !(diameter > 0.0) {
            return Err(Error::Geometry("diameter must be positive".into()));
        }
        let r = diameter / 2.0;
        let positions = (0..n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                Point3::new(r * a.cos(), r * a.sin(), 0.0)
            })
            .collect();
        Self::new(positions, ArrayLayout::Circular)
    }

    /// `n` microphones uniformly spread along the `x` axis over `aperture` meters.
    pub fn linear(n: usize, aperture: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Geometry("linear array needs at least 2 microphones".into()));
        }
        let step = aperture / (n - 1) as f64;
        let positions = (0..n)
            .map(|i| Point3::new(-aperture / 2.0 + step * i as f64, 0.0, 0.0))
            .collect();
        Self::new(positions, ArrayLayout::Linear)
    }

    /// Named presets: `circ8_5cm` and `lin8_22.5cm`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "circ8_5cm" => Self::circular(8, 0.05),
            "lin8_22.5cm" => Self::linear(8, 0.225),
            other => Err(Error::Config(format!("unknown array preset '{other}'"))),
        }
    }

    /// Parses whitespace-separated `x y z` lines (meters). `#` starts a comment.
    pub fn parse_config(text: &str) -> Result<Self> {
        let mut positions = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Config(format!("line {}: cannot parse '{s}' as a number", lineno + 1)))
                })
                .collect::<Result<_>>()?;
            if vals.len() != 3 {
                return Err(Error::Config(format!(
                    "line {}: expected 3 coordinates, got {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            positions.push(Point3::new(vals[0], vals[1], vals[2]));
        }
        Self::new(positions, ArrayLayout::Custom)
    }

    /// Loads a preset by name, or a plain-text position file otherwise.
    pub fn load(spec: &str) -> Result<Self> {
        if let Ok(array) = Self::preset(spec) {
            return Ok(array);
        }
        let text = std::fs::read_to_string(Path::new(spec)).map_err(|e| Error::io(spec, e))?;
        Self::parse_config(&text)
    }

    pub fn num_mics(&self) -> usize {
        self.positions.len()
    }

    pub fn layout(&self) -> ArrayLayout {
        self.layout
    }

    pub fn position(&self, i: usize) -> Point3 {
        let p = self.positions[i];
        Point3::new(p[0], p[1], p[2])
    }

    pub fn positions(&self) -> impl Iterator<Item = Point3> + '_ {
        self.positions.iter().map(|p| Point3::new(p[0], p[1], p[2]))
    }

    pub fn max_pairwise_distance(&self) -> f64 {
        let mut best: f64 = 0.0;
        for i in 0..self.num_mics() {
            for j in i + 1..self.num_mics() {
                best = best.max((self.position(i) - self.position(j)).norm());
            }
        }
        best
    }

    /// Keeps only the listed microphones, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        validate_selection(indices, self.num_mics())?;
        let positions = indices.iter().map(|&i| self.position(i)).collect();
        Self::new(positions, self.layout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicPair {
    pub p1: usize,
    pub p2: usize,
    pub spacing: f64,
    /// Unit vector pointing from `p2` to `p1`.
    pub axis: [f64; 3],
}

impl MicPair {
    pub fn new(array: &MicArray, p1: usize, p2: usize) -> Result<Self> {
        let m = array.num_mics();
        if p1 >= m || p2 >= m {
            return Err(Error::Geometry(format!("pair ({p1}, {p2}) out of range for {m} mics")));
        }
        if p1 == p2 {
            return Err(Error::Geometry(format!("pair ({p1}, {p2}) repeats a microphone")));
        }
        let diff = array.position(p1) - array.position(p2);
        let spacing = diff.norm();
        let axis = diff / spacing;
        Ok(Self {
            p1,
            p2,
            spacing,
            axis: [axis.x, axis.y, axis.z],
        })
    }

    pub fn axis(&self) -> Point3 {
        Point3::new(self.axis[0], self.axis[1], self.axis[2])
    }

    pub fn reversed(&self) -> Self {
        Self {
            p1: self.p2,
            p2: self.p1,
            spacing: self.spacing,
            axis: [-self.axis[0], -self.axis[1], -self.axis[2]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSelection {
    #[default]
    All,
    Subset(Vec<usize>),
}

fn validate_selection(indices: &[usize], m: usize) -> Result<()> {
    for (k, &i) in indices.iter().enumerate() {
        if i >= m {
            return Err(Error::Geometry(format!("mic index {i} out of range for {m} mics")));
        }
        if indices[..k].contains(&i) {
            return Err(Error::Geometry(format!("mic index {i} selected twice")));
        }
    }
    Ok(())
}

/// All unordered pairs of the selected microphones, `p1 < p2`, in lexicographic order.
pub fn enumerate_pairs(array: &MicArray, selection: &PairSelection) -> Result<Vec<MicPair>> {
    let mut indices: Vec<usize> = match selection {
        PairSelection::All => (0..array.num_mics()).collect(),
        PairSelection::Subset(list) => {
            validate_selection(list, array.num_mics())?;
            list.clone()
        }
    };
    if indices.len() < 2 {
        return Err(Error::Geometry("pair selection needs at least 2 microphones".into()));
    }
    indices.sort_unstable();
    let mut pairs = Vec::with_capacity(indices.len() * (indices.len() - 1) / 2);
    for (a, &i) in indices.iter().enumerate() {
        for &j in &indices[a + 1..] {
            pairs.push(MicPair::new(array, i, j)?);
        }
    }
    Ok(pairs)
}

/// Unit vector towards azimuth `azimuth_deg` and elevation `elevation_deg`.
pub fn unit_direction(azimuth_deg: f64, elevation_deg: f64) -> Point3 {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    Point3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// Far-field path difference `Δ·cos θ'·cos φ` of a plane wave from `(θ, φ)`,
/// where `θ'` is the azimuth relative to the pair axis. Positive when the wave
/// reaches `p1` first.
pub fn tdoa_distance(pair: &MicPair, azimuth_deg: f64, elevation_deg: f64) -> f64 {
    pair.spacing * pair.axis().dot(&unit_direction(azimuth_deg, elevation_deg))
}

/// Wraps an angle in degrees into `(-180, 180]`.
pub fn wrap_degrees(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(360.0);
    if a > 180.0 {
        a -= 360.0;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourcePose {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
}

impl SourcePose {
    pub fn new(azimuth: f64, elevation: f64, distance: f64) -> Result<Self> {
        if !(-180.0..=180.0).contains(&azimuth) {
            return Err(Error::Geometry(format!("azimuth {azimuth} outside [-180, 180]")));
        }
        if !(-90.0..=90.0).contains(&elevation) {
            return Err(Error::Geometry(format!("elevation {elevation} outside [-90, 90]")));
        }
        if !(distance > 0.0 && distance.is_finite()) {
            return Err(Error::Geometry(format!("distance {distance} must be positive")));
        }
        Ok(Self {
            azimuth,
            elevation,
            distance,
        })
    }

    pub fn to_cartesian(&self) -> Point3 {
        unit_direction(self.azimuth, self.elevation) * self.distance
    }

    /// Inverse of [`SourcePose::to_cartesian`] for any non-zero offset.
    pub fn from_cartesian(p: Point3) -> Result<Self> {
        let distance = p.norm();
        if !(distance > 0.0) {
            return Err(Error::Geometry("source coincides with the array center".into()));
        }
        let elevation = (p.z / distance).clamp(-1.0, 1.0).asin().to_degrees();
        let azimuth = wrap_degrees(p.y.atan2(p.x).to_degrees());
        Self::new(azimuth, elevation, distance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Angular,
    Spherical,
    Conical,
    Ring,
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RegionKind::Angular => "angular",
            RegionKind::Spherical => "spherical",
            RegionKind::Conical => "conical",
            RegionKind::Ring => "ring",
        };
        f.write_str(s)
    }
}

/// A query region `{[θl, θh], [φl, φh], [dl, dh]}`.
///
/// The azimuth window is stored unwrapped with `θl ≤ θh ≤ θl + 360`; a window
/// given as `[170, -170]` is stored as `[170, 190]` and covers the short arc
/// through 180°.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryRegion {
    pub kind: RegionKind,
    pub azimuth: (f64, f64),
    pub elevation: (f64, f64),
    #[serde(with = "distance_window")]
    pub distance: (f64, f64),
}

/// JSON has no infinity, so an unbounded upper distance is written as `"inf"`.
mod distance_window {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Bound {
        Finite(f64),
        Named(String),
    }

    fn encode(v: f64) -> Bound {
        if v == f64::INFINITY {
            Bound::Named("inf".into())
        } else {
            Bound::Finite(v)
        }
    }

    fn decode<E: serde::de::Error>(b: Bound) -> Result<f64, E> {
        match b {
            Bound::Finite(v) => Ok(v),
            Bound::Named(s) if s == "inf" => Ok(f64::INFINITY),
            Bound::Named(s) => Err(E::custom(format!("invalid distance bound '{s}'"))),
        }
    }

    pub fn serialize<S: Serializer>(w: &(f64, f64), s: S) -> Result<S::Ok, S::Error> {
        (encode(w.0), encode(w.1)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(f64, f64), D::Error> {
        let (a, b) = <(Bound, Bound)>::deserialize(d)?;
        Ok((decode(a)?, decode(b)?))
    }
}

pub const FULL_AZIMUTH: (f64, f64) = (-180.0, 180.0);
pub const FULL_ELEVATION: (f64, f64) = (-90.0, 90.0);

fn unwrap_window(lo: f64, hi: f64) -> Result<(f64, f64)> {
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Geometry("azimuth window must be finite".into()));
    }
    if hi - lo >= 360.0 {
        return Ok((lo, lo + 360.0));
    }
    let hi = if hi < lo { hi + 360.0 } else { hi };
    Ok((lo, hi))
}

impl QueryRegion {
    pub fn new(kind: RegionKind, azimuth: (f64, f64), elevation: (f64, f64), distance: (f64, f64)) -> Result<Self> {
        let azimuth = unwrap_window(azimuth.0, azimuth.1)?;
        if !(elevation.0 <= elevation.1) || elevation.0 < -90.0 || elevation.1 > 90.0 {
            return Err(Error::Geometry(format!("bad elevation window {elevation:?}")));
        }
        if !(0.0 <= distance.0 && distance.0 <= distance.1) || distance.0.is_nan() {
            return Err(Error::Geometry(format!("bad distance window {distance:?}")));
        }
        let full_angles = azimuth_is_full(azimuth) && elevation == FULL_ELEVATION;
        match kind {
            RegionKind::Angular if distance != (0.0, f64::INFINITY) => {
                return Err(Error::Geometry("angular regions span all distances".into()))
            }
            RegionKind::Spherical if !full_angles || distance.0 != 0.0 => {
                return Err(Error::Geometry(
                    "spherical regions span all angles and start at distance 0".into(),
                ))
            }
            RegionKind::Conical if distance.0 != 0.0 || !distance.1.is_finite() => {
                return Err(Error::Geometry("conical regions need a finite [0, dh] window".into()))
            }
            RegionKind::Ring if !(distance.0 > 0.0) || !distance.1.is_finite() || !full_angles => {
                return Err(Error::Geometry("ring regions need 0 < dl <= dh < inf".into()))
            }
            _ => {}
        }
        Ok(Self {
            kind,
            azimuth,
            elevation,
            distance,
        })
    }

    pub fn angular(lo: f64, hi: f64) -> Result<Self> {
        Self::new(RegionKind::Angular, (lo, hi), FULL_ELEVATION, (0.0, f64::INFINITY))
    }

    pub fn angular_2d(azimuth: (f64, f64), elevation: (f64, f64)) -> Result<Self> {
        Self::new(RegionKind::Angular, azimuth, elevation, (0.0, f64::INFINITY))
    }

    pub fn spherical(radius: f64) -> Result<Self> {
        Self::new(RegionKind::Spherical, FULL_AZIMUTH, FULL_ELEVATION, (0.0, radius))
    }

    pub fn conical(lo: f64, hi: f64, radius: f64) -> Result<Self> {
        Self::new(RegionKind::Conical, (lo, hi), FULL_ELEVATION, (0.0, radius))
    }

    pub fn ring(inner: f64, outer: f64) -> Result<Self> {
        Self::new(RegionKind::Ring, FULL_AZIMUTH, FULL_ELEVATION, (inner, outer))
    }

    /// Width of the azimuth window in degrees, in `[0, 360]`.
    pub fn azimuth_width(&self) -> f64 {
        self.azimuth.1 - self.azimuth.0
    }

    pub fn has_angular_window(&self) -> bool {
        matches!(self.kind, RegionKind::Angular | RegionKind::Conical)
    }

    pub fn contains(&self, pose: &SourcePose) -> bool {
        region_contains(self, pose)
    }

    /// The spherical queries whose difference forms this ring: `([0, dh], [0, dl])`.
    pub fn ring_bounds(&self) -> Option<(QueryRegion, QueryRegion)> {
        if self.kind != RegionKind::Ring {
            return None;
        }
        let outer = QueryRegion::spherical(self.distance.1).ok()?;
        let inner = QueryRegion::spherical(self.distance.0).ok()?;
        Some((outer, inner))
    }
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, at: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::QueryParse {
            position: at,
            message: message.into(),
        })
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn expect(&mut self, token: &str) -> Result<()> {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            Ok(())
        } else {
            self.err(self.pos, format!("expected '{token}'"))
        }
    }

    fn number(&mut self) -> Result<f64> {
        let bytes = self.rest().as_bytes();
        let mut i = 0;
        if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
            i += 1;
        }
        let digits = |i: &mut usize| {
            let start = *i;
            while *i < bytes.len() && bytes[*i].is_ascii_digit() {
                *i += 1;
            }
            *i > start
        };
        let mut any = digits(&mut i);
        if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1] != b'.' {
            i += 1;
            any |= digits(&mut i);
        }
        if any && i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                j += 1;
            }
            if digits(&mut j) {
                i = j;
            }
        }
        if !any {
            return self.err(self.pos, "expected a number");
        }
        let value = self.rest()[..i]
            .parse::<f64>()
            .or_else(|_| self.err(self.pos, "malformed number"))?;
        self.pos += i;
        Ok(value)
    }

    fn range(&mut self) -> Result<(usize, f64, f64)> {
        let start = self.pos;
        let lo = self.number()?;
        self.expect("..")?;
        let hi = self.number()?;
        Ok((start, lo, hi))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.text.len() {
            Ok(())
        } else {
            self.err(self.pos, "unexpected trailing input")
        }
    }
}

impl QueryRegion {
    /// Parses `az:LO..HI[,el:LO..HI]`, `dist:0..R`, `cone:az:LO..HI,dist:0..R`
    /// or `ring:IN..OUT`. Errors carry the 0-based byte offset of the problem.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Cursor { text, pos: 0 };
        let build = |c: &Cursor, at: usize, r: Result<Self>| match r {
            Ok(q) => Ok(q),
            Err(Error::Geometry(m)) => c.err(at, m),
            Err(e) => Err(e),
        };
        let query = if text.starts_with("az:") {
            c.expect("az:")?;
            let (at, lo, hi) = c.range()?;
            let elevation = if c.rest().starts_with(",el:") {
                c.expect(",el:")?;
                let (_, a, b) = c.range()?;
                (a, b)
            } else {
                FULL_ELEVATION
            };
            build(&c, at, Self::angular_2d((lo, hi), elevation))?
        } else if text.starts_with("dist:") {
            c.expect("dist:")?;
            let (at, lo, hi) = c.range()?;
            if lo != 0.0 {
                return c.err(at, "distance queries start at 0; use ring:IN..OUT for a shell");
            }
            build(&c, at, Self::spherical(hi))?
        } else if text.starts_with("cone:") {
            c.expect("cone:")?;
            c.expect("az:")?;
            let (at, lo, hi) = c.range()?;
            c.expect(",")?;
            c.expect("dist:")?;
            let (dat, dlo, dhi) = c.range()?;
            if dlo != 0.0 {
                return c.err(dat, "conical queries start at distance 0");
            }
            build(&c, at, Self::conical(lo, hi, dhi))?
        } else if text.starts_with("ring:") {
            c.expect("ring:")?;
            let (at, lo, hi) = c.range()?;
            build(&c, at, Self::ring(lo, hi))?
        } else {
            return c.err(0, "expected one of 'az:', 'dist:', 'cone:', 'ring:'");
        };
        c.finish()?;
        Ok(query)
    }
}

impl std::str::FromStr for QueryRegion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

fn azimuth_is_full(window: (f64, f64)) -> bool {
    window.1 - window.0 >= 360.0
}

/// Azimuth membership with wrap-around: `θ` is inside when its counter-clockwise
/// offset from `θl` does not exceed the window width.
pub fn azimuth_in_window(azimuth: f64, window: (f64, f64)) -> bool {
    const EPS: f64 = 1e-9;
    let width = window.1 - window.0;
    if width >= 360.0 - EPS {
        return true;
    }
    let offset = (azimuth - window.0).rem_euclid(360.0);
    offset <= width + EPS || offset >= 360.0 - EPS
}

pub fn region_contains(region: &QueryRegion, pose: &SourcePose) -> bool {
    azimuth_in_window(pose.azimuth, region.azimuth)
        && region.elevation.0 <= pose.elevation
        && pose.elevation <= region.elevation.1
        && region.distance.0 <= pose.distance
        && pose.distance <= region.distance.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_match_stated_extent() {
        let circ = MicArray::preset("circ8_5cm").unwrap();
        assert_eq!(circ.num_mics(), 8);
        assert!((circ.max_pairwise_distance() - 0.05).abs() < 1e-9);
        let lin = MicArray::preset("lin8_22.5cm").unwrap();
        assert!((lin.max_pairwise_distance() - 0.225).abs() < 1e-9);
        let d01 = (lin.position(1) - lin.position(0)).norm();
        let d67 = (lin.position(7) - lin.position(6)).norm();
        assert!((d01 - d67).abs() < 1e-12);
    }

    #[test]
    fn array_rejects_bad_geometry() {
        assert!(MicArray::new(vec![Point3::zeros()], ArrayLayout::Custom).is_err());
        assert!(MicArray::new(vec![Point3::zeros(), Point3::zeros()], ArrayLayout::Custom).is_err());
        assert!(MicArray::new(
            vec![Point3::zeros(), Point3::new(f64::NAN, 0.0, 0.0)],
            ArrayLayout::Custom
        )
        .is_err());
    }

    #[test]
    fn parse_config_reads_positions() {
        let a = MicArray::parse_config("# two mics\n0 0 0\n0.05, 0, 0 # second\n").unwrap();
        assert_eq!(a.num_mics(), 2);
        assert!((a.position(1).x - 0.05).abs() < 1e-15);
        assert!(MicArray::parse_config("0 0\n1 1 1").is_err());
    }

    #[test]
    fn pair_enumeration_counts() {
        let circ = MicArray::preset("circ8_5cm").unwrap();
        let pairs = enumerate_pairs(&circ, &PairSelection::All).unwrap();
        assert_eq!(pairs.len(), 28);
        assert!(pairs.iter().all(|p| p.p1 < p.p2));
        let two = MicArray::linear(2, 0.1).unwrap();
        assert_eq!(enumerate_pairs(&two, &PairSelection::All).unwrap().len(), 1);
        let sub = enumerate_pairs(&circ, &PairSelection::Subset(vec![6, 0, 2, 4])).unwrap();
        assert_eq!(sub.len(), 6);
        assert!(sub.iter().all(|p| p.p1 < p.p2));
        for p in &pairs {
            let d = (circ.position(p.p1) - circ.position(p.p2)).norm();
            assert!((p.spacing - d).abs() < 1e-15);
        }
    }

    #[test]
    fn pair_enumeration_rejects_bad_selection() {
        let circ = MicArray::preset("circ8_5cm").unwrap();
        assert!(enumerate_pairs(&circ, &PairSelection::Subset(vec![0, 0, 1])).is_err());
        assert!(enumerate_pairs(&circ, &PairSelection::Subset(vec![0, 8])).is_err());
        assert!(enumerate_pairs(&circ, &PairSelection::Subset(vec![3])).is_err());
    }

    fn x_pair(spacing: f64) -> MicPair {
        let a = MicArray::new(
            vec![
                Point3::new(spacing / 2.0, 0.0, 0.0),
                Point3::new(-spacing / 2.0, 0.0, 0.0),
            ],
            ArrayLayout::Custom,
        )
        .unwrap();
        MicPair::new(&a, 0, 1).unwrap()
    }

    #[test]
    fn tdoa_examples() {
        let pair = x_pair(0.05);
        assert!((tdoa_distance(&pair, 0.0, 0.0) - 0.05).abs() < 1e-15);
        assert!(tdoa_distance(&pair, 90.0, 0.0).abs() < 1e-15);
        assert!(tdoa_distance(&pair, 90.0, 40.0).abs() < 1e-15);
        assert!((tdoa_distance(&pair, 60.0, 0.0) - 0.025).abs() < 1e-15);
    }

    #[test]
    fn tdoa_uses_pair_relative_azimuth() {
        // Pair axis rotated to 30 degrees: a source at 90 degrees is 60 degrees off-axis.
        let axis = unit_direction(30.0, 0.0) * 0.025;
        let a = MicArray::new(vec![axis, -axis], ArrayLayout::Custom).unwrap();
        let pair = MicPair::new(&a, 0, 1).unwrap();
        assert!((tdoa_distance(&pair, 90.0, 0.0) - 0.025).abs() < 1e-12);
    }

    #[test]
    fn region_examples() {
        let ang = QueryRegion::angular(-30.0, 30.0).unwrap();
        assert!(ang.contains(&SourcePose::new(0.0, 0.0, 1.0).unwrap()));
        let sph = QueryRegion::spherical(0.5).unwrap();
        assert!(!sph.contains(&SourcePose::new(0.0, 0.0, 0.9).unwrap()));
        let wrap = QueryRegion::angular(170.0, -170.0).unwrap();
        assert!(wrap.contains(&SourcePose::new(179.0, 0.0, 1.0).unwrap()));
        assert!(wrap.contains(&SourcePose::new(-175.0, 0.0, 1.0).unwrap()));
        assert!(!wrap.contains(&SourcePose::new(0.0, 0.0, 1.0).unwrap()));
        let big = QueryRegion::angular(-270.0, -110.0).unwrap();
        assert!(big.contains(&SourcePose::new(120.0, 0.0, 1.0).unwrap()));
        assert!(big.contains(&SourcePose::new(-120.0, 0.0, 1.0).unwrap()));
        assert!(!big.contains(&SourcePose::new(0.0, 0.0, 1.0).unwrap()));
    }

    /// Dense brute-force oracle: step along the arc from θl to θh in small increments
    /// and compare against the membership predicate.
    #[test]
    fn wrap_membership_matches_dense_arc_walk() {
        for &(lo, hi) in &[(170.0, -170.0), (-30.0, 30.0), (100.0, 190.0), (-200.0, -120.0)] {
            let region = QueryRegion::angular(lo, hi).unwrap();
            let width = region.azimuth_width();
            let mut covered = vec![false; 3600];
            let steps = (width * 10.0).round() as usize;
            for s in 0..=steps {
                let a = wrap_degrees(lo + s as f64 * 0.1);
                let idx = ((a + 180.0) * 10.0).round() as usize % 3600;
                covered[idx] = true;
            }
            for (idx, &inside) in covered.iter().enumerate() {
                let az = idx as f64 / 10.0 - 180.0;
                let pose = SourcePose::new(az, 0.0, 1.0).unwrap();
                assert_eq!(region.contains(&pose), inside, "window [{lo},{hi}] az {az}");
            }
        }
    }

    #[test]
    fn region_variant_invariants() {
        assert!(QueryRegion::new(RegionKind::Angular, (-10.0, 10.0), FULL_ELEVATION, (0.0, 1.0)).is_err());
        assert!(QueryRegion::ring(0.0, 1.0).is_err());
        assert!(QueryRegion::spherical(-1.0).is_err());
        assert!(QueryRegion::conical(-10.0, 10.0, f64::INFINITY).is_err());
        let r = QueryRegion::ring(0.5, 1.1).unwrap();
        let (outer, inner) = r.ring_bounds().unwrap();
        assert_eq!(outer.distance, (0.0, 1.1));
        assert_eq!(inner.distance, (0.0, 0.5));
    }

    proptest! {
        #[test]
        fn cartesian_round_trip(az in -179.9f64..180.0, el in -89.9f64..89.9, d in 0.01f64..20.0) {
            let pose = SourcePose::new(az, el, d).unwrap();
            let back = SourcePose::from_cartesian(pose.to_cartesian()).unwrap();
            prop_assert!((back.azimuth - az).abs() < 1e-9);
            prop_assert!((back.elevation - el).abs() < 1e-9);
            prop_assert!((back.distance - d).abs() < 1e-9);
        }

        #[test]
        fn tdoa_parity_and_bound(az in -180.0f64..180.0, el in -90.0f64..90.0, i in 0usize..28) {
            let circ = MicArray::preset("circ8_5cm").unwrap();
            let pair = enumerate_pairs(&circ, &PairSelection::All).unwrap()[i];
            let d = tdoa_distance(&pair, az, el);
            prop_assert!(d.abs() <= pair.spacing + 1e-15);
            prop_assert!((d - tdoa_distance(&pair, az, -el)).abs() < 1e-15);
            prop_assert!((d + tdoa_distance(&pair.reversed(), az, el)).abs() < 1e-15);
        }

        #[test]
        fn linear_array_mirror_ambiguity(az in -180.0f64..180.0, el in -60.0f64..60.0) {
            let lin = MicArray::preset("lin8_22.5cm").unwrap();
            for pair in enumerate_pairs(&lin, &PairSelection::All).unwrap() {
                let a = tdoa_distance(&pair, az, el);
                let b = tdoa_distance(&pair, -az, el);
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn ring_is_sphere_difference(a in 0.05f64..2.0, extra in 0.0f64..2.0, d in 0.01f64..5.0, az in -180.0f64..180.0) {
            let b = a + extra;
            let ring = QueryRegion::ring(a, b).unwrap();
            let pose = SourcePose::new(az, 0.0, d).unwrap();
            let outer = QueryRegion::spherical(b).unwrap().contains(&pose);
            let inner = QueryRegion::spherical(a).unwrap().contains(&pose);
            // Boundary d == a belongs to both the ring and the inner sphere.
            if (d - a).abs() > 1e-12 {
                prop_assert_eq!(ring.contains(&pose), outer && !inner);
            }
        }
    }

    #[test]
    fn parses_query_strings() {
        assert_eq!(
            QueryRegion::parse("az:-30..30").unwrap(),
            QueryRegion::angular(-30.0, 30.0).unwrap()
        );
        assert_eq!(
            QueryRegion::parse("dist:0..0.9").unwrap(),
            QueryRegion::spherical(0.9).unwrap()
        );
        assert_eq!(
            QueryRegion::parse("cone:az:-150..-90,dist:0..1.5").unwrap(),
            QueryRegion::conical(-150.0, -90.0, 1.5).unwrap()
        );
        assert_eq!(
            QueryRegion::parse("ring:0.5..1.1").unwrap(),
            QueryRegion::ring(0.5, 1.1).unwrap()
        );
        assert_eq!(
            QueryRegion::parse("az:10..50,el:-20..20").unwrap(),
            QueryRegion::angular_2d((10.0, 50.0), (-20.0, 20.0)).unwrap()
        );
    }

    #[test]
    fn query_errors_report_position() {
        let pos = |s: &str| match QueryRegion::parse(s) {
            Err(Error::QueryParse { position, .. }) => position,
            other => panic!("{s}: {other:?}"),
        };
        assert_eq!(pos("azimuth:0..10"), 0);
        assert_eq!(pos("az:-30.30"), 9);
        assert_eq!(pos("az:x..30"), 3);
        assert_eq!(pos("dist:0..1,"), 9);
        assert_eq!(pos("cone:az:0..10;dist:0..1"), 13);
        assert_eq!(pos("ring:1.2..0.5"), 5);
        assert_eq!(pos("dist:0.3..1"), 5);
    }

    #[test]
    fn unbounded_distance_survives_json() {
        let q = QueryRegion::angular(-30.0, 30.0).unwrap();
        let text = serde_json::to_string(&q).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<QueryRegion>(&text).unwrap(), q);
        let r = QueryRegion::ring(0.5, 1.1).unwrap();
        assert_eq!(
            serde_json::from_str::<QueryRegion>(&serde_json::to_string(&r).unwrap()).unwrap(),
            r
        );
    }
}
