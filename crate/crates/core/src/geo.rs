//! Great-circle distances between recording sites and species occurrences.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("coordinate out of range: latitude {latitude}, longitude {longitude}")]
    InvalidPoint { latitude: f64, longitude: f64 },
    #[error("unknown site `{0}`")]
    UnknownSite(String),
    #[error("species `{0}` has no occurrences")]
    UnknownSpecies(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeoError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    latitude_deg: f64,
    longitude_deg: f64,
}

impl GeoPoint {
    pub fn new(latitude_deg: f64, longitude_deg: f64) -> Result<Self> {
        if (-90.0..=90.0).contains(&latitude_deg) && (-180.0..=180.0).contains(&longitude_deg) {
            Ok(Self {
                latitude_deg,
                longitude_deg,
            })
        } else {
            Err(GeoError::InvalidPoint {
                latitude: latitude_deg,
                longitude: longitude_deg,
            })
        }
    }

    pub fn latitude_deg(&self) -> f64 {
        self.latitude_deg
    }

    pub fn longitude_deg(&self) -> f64 {
        self.longitude_deg
    }
}

/// Haversine distance on a sphere of radius 6371 km.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi_a, phi_b) = (a.latitude_deg.to_radians(), b.latitude_deg.to_radians());
    let d_phi = phi_b - phi_a;
    let d_lambda = (b.longitude_deg - a.longitude_deg).to_radians();
    let h =
        (d_phi / 2.0).sin().powi(2) + phi_a.cos() * phi_b.cos() * (d_lambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteId {
    Col,
    Cor,
    Sne,
    Ssw,
}

impl SiteId {
    pub const ALL: [SiteId; 4] = [SiteId::Col, SiteId::Cor, SiteId::Sne, SiteId::Ssw];

    pub fn as_str(&self) -> &'static str {
        match self {
            SiteId::Col => "COL",
            SiteId::Cor => "COR",
            SiteId::Sne => "SNE",
            SiteId::Ssw => "SSW",
        }
    }

    /// Approximate recorder locations, used when no sites file is given.
    pub fn default_location(&self) -> GeoPoint {
        let (lat, lon) = match self {
            SiteId::Col => (5.57, -75.85),
            SiteId::Cor => (10.12, -84.51),
            SiteId::Sne => (38.49, -119.95),
            SiteId::Ssw => (42.47, -76.45),
        };
        GeoPoint {
            latitude_deg: lat,
            longitude_deg: lon,
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SiteId {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self> {
        SiteId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| GeoError::UnknownSite(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub id: SiteId,
    pub location: GeoPoint,
}

impl Site {
    pub fn with_default_location(id: SiteId) -> Self {
        Self {
            id,
            location: id.default_location(),
        }
    }
}

/// Site locations keyed by id; unlisted sites fall back to their defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteTable {
    sites: BTreeMap<SiteId, GeoPoint>,
}

impl SiteTable {
    pub fn insert(&mut self, id: SiteId, location: GeoPoint) {
        self.sites.insert(id, location);
    }

    pub fn site(&self, id: SiteId) -> Site {
        Site {
            id,
            location: self
                .sites
                .get(&id)
                .copied()
                .unwrap_or_else(|| id.default_location()),
        }
    }

    /// Reads `site_id,latitude,longitude`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        expect_header(reader.headers()?, &["site_id", "latitude", "longitude"])?;
        let mut table = Self::default();
        for record in reader.records() {
            let record = record?;
            let id: SiteId = record[0].trim().parse()?;
            let point = parse_point(&record[1], &record[2])?
                .ok_or_else(|| GeoError::Schema(format!("site {id} has no coordinates")))?;
            table.insert(id, point);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn expect_header(header: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if header.iter().map(str::trim).eq(expected.iter().copied()) {
        Ok(())
    } else {
        Err(GeoError::Schema(format!(
            "expected header `{}`",
            expected.join(",")
        )))
    }
}

/// Empty fields mean "no coordinates" and yield `None`.
fn parse_point(lat: &str, lon: &str) -> Result<Option<GeoPoint>> {
    let (lat, lon) = (lat.trim(), lon.trim());
    if lat.is_empty() || lon.is_empty() {
        return Ok(None);
    }
    let parse = |v: &str| {
        v.parse::<f64>()
            .map_err(|_| GeoError::Schema(format!("bad coordinate `{v}`")))
    };
    GeoPoint::new(parse(lat)?, parse(lon)?).map(Some)
}

/// Training-recording locations per species.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OccurrenceTable {
    points: BTreeMap<String, Vec<GeoPoint>>,
}

impl OccurrenceTable {
    pub fn add(&mut self, species: impl Into<String>, point: GeoPoint) {
        self.points.entry(species.into()).or_default().push(point);
    }

    pub fn points(&self, species: &str) -> Option<&[GeoPoint]> {
        self.points.get(species).map(Vec::as_slice)
    }

    pub fn species(&self) -> impl Iterator<Item = &str> {
        self.points.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reads `species,latitude,longitude`; rows with blank coordinates are skipped.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        expect_header(reader.headers()?, &["species", "latitude", "longitude"])?;
        let mut table = Self::default();
        for record in reader.records() {
            let record = record?;
            if let Some(p) = parse_point(&record[1], &record[2])? {
                table.add(record[0].trim(), p);
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["species", "latitude", "longitude"])?;
        for (species, points) in &self.points {
            for p in points {
                out.write_record([
                    species.clone(),
                    p.latitude_deg.to_string(),
                    p.longitude_deg.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Smallest distance from `site` to any recorded occurrence of `species`.
pub fn min_haversine_distance(species: &str, site: &Site, occ: &OccurrenceTable) -> Result<f64> {
    occ.points(species)
        .filter(|p| !p.is_empty())
        .map(|points| {
            points
                .iter()
                .map(|&p| haversine_km(p, site.location))
                .fold(f64::INFINITY, f64::min)
        })
        .ok_or_else(|| GeoError::UnknownSpecies(species.to_string()))
}

/// Like [`min_haversine_distance`] but maps species without occurrences to
/// the half circumference, the largest possible distance.
pub fn min_distance_or_max(species: &str, site: &Site, occ: &OccurrenceTable) -> f64 {
    min_haversine_distance(species, site, occ).unwrap_or(std::f64::consts::PI * EARTH_RADIUS_KM)
}
