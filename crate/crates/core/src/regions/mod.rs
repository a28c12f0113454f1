//! Multi-granularity region sets loaded from polygon feature collections.

mod geometry;
mod hierarchy;

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};

pub use geometry::{intersection_area, BBox, Coord, Location, Polygon};
pub use hierarchy::{assign_labels, build_hierarchy, HierarchyTree, LabelVector, Unassignable};

/// Default feature property holding the dense region id.
pub const DEFAULT_ID_PROPERTY: &str = "region_id";

#[derive(Debug, Clone)]
pub struct Region {
    pub id: usize,
    pub name: String,
    pub parts: Vec<Polygon>,
    bbox: BBox,
}

impl Region {
    pub fn new(id: usize, name: impl Into<String>, parts: Vec<Polygon>) -> Self {
        let mut bbox = BBox::empty();
        for p in &parts {
            bbox.union(&p.bbox());
        }
        Region {
            id,
            name: name.into(),
            parts,
            bbox,
        }
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    /// Closed containment: boundary points count as inside.
    pub fn locate(&self, p: Coord) -> Location {
        if !self.bbox.contains(p) {
            return Location::Outside;
        }
        let mut best = Location::Outside;
        for part in &self.parts {
            match part.locate(p) {
                Location::Inside => return Location::Inside,
                Location::Boundary => best = Location::Boundary,
                Location::Outside => {}
            }
        }
        best
    }

    pub fn area(&self) -> f64 {
        self.parts.iter().map(Polygon::area).sum()
    }

    /// Overlap area with another region; parts are assumed pairwise disjoint.
    pub fn intersection_area(&self, other: &Region) -> f64 {
        if !self.bbox.intersects(&other.bbox) {
            return 0.0;
        }
        let mut total = 0.0;
        for a in &self.parts {
            for b in &other.parts {
                total += intersection_area(a, b);
            }
        }
        total
    }
}

/// Uniform grid over region bounding boxes.
#[derive(Debug, Clone)]
struct GridIndex {
    extent: BBox,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl GridIndex {
    fn build(regions: &[Region]) -> Self {
        let mut extent = BBox::empty();
        for r in regions {
            extent.union(r.bbox());
        }
        let side = ((regions.len() as f64).sqrt().ceil() as usize).clamp(1, 512);
        let mut index = GridIndex {
            extent,
            nx: side,
            ny: side,
            cells: vec![Vec::new(); side * side],
        };
        for (i, r) in regions.iter().enumerate() {
            let (x0, y0) = index.cell_of(r.bbox().min);
            let (x1, y1) = index.cell_of(r.bbox().max);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    index.cells[y * index.nx + x].push(i as u32);
                }
            }
        }
        index
    }

    fn axis_cell(v: f64, lo: f64, hi: f64, n: usize) -> usize {
        if hi <= lo {
            return 0;
        }
        let f = ((v - lo) / (hi - lo) * n as f64).floor();
        if f < 0.0 {
            0
        } else {
            (f as usize).min(n - 1)
        }
    }

    fn cell_of(&self, c: Coord) -> (usize, usize) {
        (
            Self::axis_cell(c.lon, self.extent.min.lon, self.extent.max.lon, self.nx),
            Self::axis_cell(c.lat, self.extent.min.lat, self.extent.max.lat, self.ny),
        )
    }

    fn point_candidates(&self, c: Coord) -> &[u32] {
        if !self.extent.contains(c) {
            return &[];
        }
        let (x, y) = self.cell_of(c);
        &self.cells[y * self.nx + x]
    }

    fn bbox_candidates(&self, b: &BBox) -> BTreeSet<u32> {
        let mut out = BTreeSet::new();
        if !self.extent.intersects(b) {
            return out;
        }
        let (x0, y0) = self.cell_of(b.min);
        let (x1, y1) = self.cell_of(b.max);
        for y in y0..=y1 {
            for x in x0..=x1 {
                out.extend(self.cells[y * self.nx + x].iter().copied());
            }
        }
        out
    }
}

/// All regions of one granularity. Region ids are dense in `[0, len)` and
/// `regions[i].id == i`.
#[derive(Debug, Clone)]
pub struct RegionSet {
    /// 1-based granularity index (1 = coarsest).
    pub granularity: usize,
    regions: Vec<Region>,
    index: GridIndex,
}

impl RegionSet {
    /// Validates ids and rings, then orders regions by id.
    pub fn new(granularity: usize, mut regions: Vec<Region>) -> Result<Self> {
        regions.sort_by_key(|r| r.id);
        for (i, r) in regions.iter().enumerate() {
            if r.id != i {
                return Err(if i > 0 && regions[i - 1].id == r.id {
                    Error::Schema(format!("duplicate region_id {} at granularity {granularity}", r.id))
                } else {
                    Error::Schema(format!(
                        "region ids at granularity {granularity} are not dense: expected {i}, found {}",
                        r.id
                    ))
                });
            }
            for part in &r.parts {
                for ring in part.rings() {
                    validate_ring(ring).map_err(|m| Error::parse(format!("region {} ({})", r.id, r.name), m))?;
                }
            }
        }
        let index = GridIndex::build(&regions);
        Ok(RegionSet {
            granularity,
            regions,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, id: usize) -> Option<&Region> {
        self.regions.get(id)
    }

    /// Smallest id of a region whose closed polygon contains `p`.
    pub fn assign(&self, p: Coord) -> Option<usize> {
        self.index
            .point_candidates(p)
            .iter()
            .map(|&i| i as usize)
            .filter(|&i| self.regions[i].locate(p) != Location::Outside)
            .min()
    }

    /// Ids of regions whose bounding box intersects `b`, ascending.
    pub fn candidates_in(&self, b: &BBox) -> Vec<usize> {
        self.index
            .bbox_candidates(b)
            .into_iter()
            .map(|i| i as usize)
            .filter(|&i| self.regions[i].bbox().intersects(b))
            .collect()
    }

    /// Interior representative point of a region.
    ///
    /// The area centroid when it lies strictly inside, otherwise the midpoint
    /// of the widest interior scanline.
    pub fn centroid(&self, id: usize) -> Result<Coord> {
        let region = self
            .region(id)
            .ok_or_else(|| Error::Label(format!("region {id} not in granularity {}", self.granularity)))?;
        let mut total_area = 0.0;
        let (mut cx, mut cy) = (0.0, 0.0);
        for part in &region.parts {
            let (c, a) = part.centroid_and_area();
            total_area += a;
            cx += c.lon * a;
            cy += c.lat * a;
        }
        if !(total_area > 0.0) {
            return Err(Error::Degenerate(format!(
                "region {id} at granularity {} has zero area",
                self.granularity
            )));
        }
        let centroid = Coord::new(cx / total_area, cy / total_area);
        if region.locate(centroid) == Location::Inside {
            return Ok(centroid);
        }
        region
            .parts
            .iter()
            .filter_map(Polygon::widest_scanline_midpoint)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(p, _)| p)
            .ok_or_else(|| Error::Degenerate(format!("region {id} has no interior scanline")))
    }

    /// Reads a polygon feature collection. `Polygon` and `MultiPolygon`
    /// geometries are accepted; multi-polygon parts share one region id.
    pub fn load(path: impl AsRef<Path>, granularity: usize, id_property: &str) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)?;
        Self::from_geojson(&value, granularity, id_property)
    }

    pub fn from_geojson(value: &Value, granularity: usize, id_property: &str) -> Result<Self> {
        let features = value
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::parse("feature collection", "missing `features` array"))?;
        let mut regions = Vec::with_capacity(features.len());
        let mut seen = BTreeSet::new();
        for (fi, feature) in features.iter().enumerate() {
            let props = feature.get("properties");
            let id = props
                .and_then(|p| p.get(id_property))
                .and_then(Value::as_u64)
                .ok_or_else(|| {
                    Error::parse(format!("feature #{fi}"), format!("missing integer property `{id_property}`"))
                })? as usize;
            let name = props
                .and_then(|p| p.get("name"))
                .and_then(Value::as_str)
                .map(str::to_owned)
                .unwrap_or_else(|| format!("region-{id}"));
            let context = format!("feature #{fi} ({id_property}={id}, name={name})");
            if !seen.insert(id) {
                return Err(Error::Schema(format!("duplicate region_id {id} in {context}")));
            }
            let geometry = feature
                .get("geometry")
                .ok_or_else(|| Error::parse(&context, "missing geometry"))?;
            let parts = parse_geometry(geometry).map_err(|m| Error::parse(&context, m))?;
            for part in &parts {
                for ring in part.rings() {
                    validate_ring(ring).map_err(|m| Error::parse(&context, m))?;
                }
            }
            regions.push(Region::new(id, name, parts));
        }
        RegionSet::new(granularity, regions)
    }

    pub fn to_geojson(&self, id_property: &str) -> Value {
        let ring_json = |ring: &Vec<Coord>| -> Value { ring.iter().map(|c| json!([c.lon, c.lat])).collect() };
        let features: Vec<Value> = self
            .regions
            .iter()
            .map(|r| {
                let polys: Vec<Value> = r
                    .parts
                    .iter()
                    .map(|p| p.rings().map(ring_json).collect::<Vec<_>>().into())
                    .collect();
                let geometry = if polys.len() == 1 {
                    json!({"type": "Polygon", "coordinates": polys[0]})
                } else {
                    json!({"type": "MultiPolygon", "coordinates": polys})
                };
                json!({
                    "type": "Feature",
                    "properties": { id_property: r.id, "name": r.name },
                    "geometry": geometry,
                })
            })
            .collect();
        json!({"type": "FeatureCollection", "features": features})
    }

    pub fn save(&self, path: impl AsRef<Path>, id_property: &str) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_geojson(id_property))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn parse_ring(v: &Value) -> std::result::Result<Vec<Coord>, String> {
    let arr = v.as_array().ok_or("ring is not an array")?;
    arr.iter()
        .map(|pt| {
            let xy = pt.as_array().filter(|a| a.len() >= 2).ok_or("vertex is not a coordinate pair")?;
            match (xy[0].as_f64(), xy[1].as_f64()) {
                (Some(lon), Some(lat)) => Ok(Coord::new(lon, lat)),
                _ => Err("non-numeric coordinate".to_string()),
            }
        })
        .collect()
}

fn parse_polygon(v: &Value) -> std::result::Result<Polygon, String> {
    let rings = v.as_array().ok_or("polygon coordinates are not an array")?;
    let mut rings = rings.iter().map(parse_ring).collect::<std::result::Result<Vec<_>, _>>()?;
    if rings.is_empty() {
        return Err("polygon has no rings".into());
    }
    let exterior = rings.remove(0);
    Ok(Polygon::new(exterior, rings))
}

fn parse_geometry(g: &Value) -> std::result::Result<Vec<Polygon>, String> {
    let kind = g.get("type").and_then(Value::as_str).ok_or("geometry without type")?;
    let coords = g.get("coordinates").ok_or("geometry without coordinates")?;
    match kind {
        "Polygon" => Ok(vec![parse_polygon(coords)?]),
        "MultiPolygon" => coords
            .as_array()
            .ok_or_else(|| "multipolygon coordinates are not an array".to_string())?
            .iter()
            .map(parse_polygon)
            .collect(),
        other => Err(format!("unsupported geometry type {other}")),
    }
}

fn validate_ring(ring: &[Coord]) -> std::result::Result<(), String> {
    if ring.len() < 4 {
        return Err(format!("ring has {} vertices, at least 4 required", ring.len()));
    }
    if ring.first() != ring.last() {
        return Err("ring is not closed".into());
    }
    for c in ring {
        if !(-180.0..=180.0).contains(&c.lon) || !(-90.0..=90.0).contains(&c.lat) {
            return Err(format!("vertex ({}, {}) out of lon/lat range", c.lon, c.lat));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_set(ids: &[(usize, f64, f64, f64, f64)]) -> RegionSet {
        let regions = ids
            .iter()
            .map(|&(id, x0, y0, x1, y1)| {
                Region::new(id, format!("r{id}"), vec![Polygon::rect(Coord::new(x0, y0), Coord::new(x1, y1))])
            })
            .collect();
        RegionSet::new(1, regions).unwrap()
    }

    #[test]
    fn unit_square_interior_and_exterior() {
        let mut regions: Vec<Region> = (0..7)
            .map(|i| {
                let x = 10.0 + i as f64;
                Region::new(i, "", vec![Polygon::rect(Coord::new(x, 10.0), Coord::new(x + 0.5, 10.5))])
            })
            .collect();
        regions.push(Region::new(7, "unit", vec![Polygon::rect(Coord::new(0.0, 0.0), Coord::new(1.0, 1.0))]));
        let set = RegionSet::new(1, regions).unwrap();
        assert_eq!(set.assign(Coord::new(0.5, 0.5)), Some(7));
        assert_eq!(set.assign(Coord::new(2.0, 2.0)), None);
    }

    #[test]
    fn shared_edge_resolves_to_smallest_id() {
        let set = square_set(&[(0, 5.0, 5.0, 6.0, 6.0), (1, 0.0, 0.0, 1.0, 1.0), (2, 1.0, 0.0, 2.0, 1.0)]);
        assert_eq!(set.assign(Coord::new(1.0, 0.5)), Some(1));
    }

    #[test]
    fn duplicate_and_sparse_ids_rejected() {
        let r = |id| Region::new(id, "", vec![Polygon::rect(Coord::new(0.0, 0.0), Coord::new(1.0, 1.0))]);
        assert!(matches!(RegionSet::new(1, vec![r(0), r(0)]), Err(Error::Schema(_))));
        assert!(matches!(RegionSet::new(1, vec![r(0), r(2)]), Err(Error::Schema(_))));
    }

    #[test]
    fn geojson_single_square() {
        let v = json!({"type": "FeatureCollection", "features": [{
            "type": "Feature", "properties": {"region_id": 0, "name": "a"},
            "geometry": {"type": "Polygon", "coordinates": [[[0,0],[1,0],[1,1],[0,1],[0,0]]]}
        }]});
        let set = RegionSet::from_geojson(&v, 1, DEFAULT_ID_PROPERTY).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.centroid(0).unwrap(), Coord::new(0.5, 0.5));
    }

    #[test]
    fn geojson_unclosed_ring_names_feature() {
        let v = json!({"type": "FeatureCollection", "features": [{
            "type": "Feature", "properties": {"rid": 4, "name": "open"},
            "geometry": {"type": "Polygon", "coordinates": [[[0,0],[1,0],[1,1],[0,1],[0,0.5]]]}
        }]});
        let err = RegionSet::from_geojson(&v, 1, "rid").unwrap_err();
        match err {
            Error::Parse { context, message } => {
                assert!(context.contains("open"), "{context}");
                assert!(message.contains("not closed"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn geojson_duplicate_id() {
        let f = json!({"type": "Feature", "properties": {"region_id": 0},
            "geometry": {"type": "Polygon", "coordinates": [[[0,0],[1,0],[1,1],[0,1],[0,0]]]}});
        let v = json!({"type": "FeatureCollection", "features": [f.clone(), f]});
        assert!(matches!(RegionSet::from_geojson(&v, 1, DEFAULT_ID_PROPERTY), Err(Error::Schema(_))));
    }

    #[test]
    fn multipolygon_parts_share_id() {
        let v = json!({"type": "FeatureCollection", "features": [{
            "type": "Feature", "properties": {"region_id": 0},
            "geometry": {"type": "MultiPolygon", "coordinates": [
                [[[0,0],[1,0],[1,1],[0,1],[0,0]]],
                [[[3,0],[4,0],[4,1],[3,1],[3,0]]]
            ]}
        }]});
        let set = RegionSet::from_geojson(&v, 1, DEFAULT_ID_PROPERTY).unwrap();
        assert_eq!(set.regions()[0].parts.len(), 2);
        assert_eq!(set.assign(Coord::new(3.5, 0.5)), Some(0));
        assert_eq!(set.assign(Coord::new(2.0, 0.5)), None);
        let back = RegionSet::from_geojson(&set.to_geojson("region_id"), 1, "region_id").unwrap();
        assert_eq!(back.regions()[0].parts, set.regions()[0].parts);
    }

    #[test]
    fn centroid_of_known_aoi() {
        let c = Coord::new(121.4283, 31.1317);
        let d = 0.002;
        let set = RegionSet::new(
            3,
            vec![Region::new(
                0,
                "aoi",
                vec![Polygon::rect(Coord::new(c.lon - d, c.lat - d), Coord::new(c.lon + d, c.lat + d))],
            )],
        )
        .unwrap();
        let got = set.centroid(0).unwrap();
        assert!((got.lon - c.lon).abs() < 1e-4 && (got.lat - c.lat).abs() < 1e-4);
    }

    #[test]
    fn centroid_of_c_shape_is_inside() {
        let ring = vec![
            Coord::new(0.0, 0.0),
            Coord::new(3.0, 0.0),
            Coord::new(3.0, 0.4),
            Coord::new(0.4, 0.4),
            Coord::new(0.4, 2.6),
            Coord::new(3.0, 2.6),
            Coord::new(3.0, 3.0),
            Coord::new(0.0, 3.0),
            Coord::new(0.0, 0.0),
        ];
        let set = RegionSet::new(1, vec![Region::new(0, "c", vec![Polygon::new(ring, vec![])])]).unwrap();
        let (area_centroid, _) = set.regions()[0].parts[0].centroid_and_area();
        assert_eq!(set.regions()[0].locate(area_centroid), Location::Outside);
        let p = set.centroid(0).unwrap();
        assert_eq!(set.assign(p), Some(0));
    }

    #[test]
    fn zero_area_centroid_errors() {
        let ring = vec![
            Coord::new(0.0, 0.0),
            Coord::new(1.0, 0.0),
            Coord::new(2.0, 0.0),
            Coord::new(0.0, 0.0),
        ];
        let set = RegionSet::new(1, vec![Region::new(0, "flat", vec![Polygon::new(ring, vec![])])]).unwrap();
        assert!(matches!(set.centroid(0), Err(Error::Degenerate(_))));
    }
}
