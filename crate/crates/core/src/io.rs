//! On-disk formats: the dataset CSV and versioned JSON documents.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{Correction, CorrectionSet, FileAssignment, NUM_FILES};
use crate::error::{Error, ReconciliationError, Result};
use crate::lineage::{LineageEdge, LineageForest, LinkDiagnostic, NodeRef};
use crate::lines::FileCorrespondence;
use crate::model::{
    Dataset, FrameCloud, NucleusId, NucleusRecord, Phase, ProjectionPlane, Vec2, Vec3, DEFAULT_TIME_INTERVAL_MIN,
    DEFAULT_VOXEL_SIZE_UM,
};
use crate::synth::GroundTruth;

/// Version written into, and required from, every JSON document.
pub const FORMAT_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 6] = ["frame", "id", "x_um", "y_um", "z_um", "phase"];

/// How the coordinate columns of a dataset CSV are to be read.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Units {
    #[default]
    Micrometers,
    /// Voxel indices, scaled by the (z, y, x) voxel size in micrometers.
    Voxels([f64; 3]),
}

impl Units {
    pub fn default_voxels() -> Self {
        Units::Voxels(DEFAULT_VOXEL_SIZE_UM)
    }

    fn scale(&self, p: Vec3) -> Vec3 {
        match self {
            Units::Micrometers => p,
            Units::Voxels([z, y, x]) => Vec3::new(p.x * x, p.y * y, p.z * z),
        }
    }
}

fn parse_err(line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        msg: msg.into(),
    }
}

pub fn read_dataset(reader: impl Read, units: Units) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let mut col = [0usize; 6];
    for (slot, name) in col.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))?;
    }

    let mut by_frame: BTreeMap<usize, Vec<NucleusRecord>> = BTreeMap::new();
    let mut seen: HashSet<(usize, String)> = HashSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(col[i]).unwrap_or("");
        let frame: usize = field(0)
            .parse()
            .map_err(|_| parse_err(line, format!("bad frame index `{}`", field(0))))?;
        let id = field(1).to_owned();
        if id.is_empty() {
            return Err(parse_err(line, "empty id"));
        }
        let mut xyz = [0.0f64; 3];
        for (k, v) in xyz.iter_mut().enumerate() {
            let raw = field(2 + k);
            *v = raw
                .parse()
                .map_err(|_| parse_err(line, format!("bad {} `{raw}`", CSV_COLUMNS[2 + k])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite {}", CSV_COLUMNS[2 + k])));
            }
        }
        let phase: Phase = field(5)
            .parse()
            .map_err(|_| parse_err(line, format!("unknown phase `{}`", field(5))))?;
        if !seen.insert((frame, id.clone())) {
            return Err(parse_err(line, format!("duplicate id `{id}` in frame {frame}")));
        }
        let position = units.scale(Vec3::new(xyz[0], xyz[1], xyz[2]));
        by_frame
            .entry(frame)
            .or_default()
            .push(NucleusRecord::new(frame, id, position, phase));
    }
    if by_frame.is_empty() {
        return Err(Error::Schema("dataset has no rows".into()));
    }
    let frames = by_frame
        .into_iter()
        .map(|(t, nuclei)| FrameCloud::new(t, nuclei, DEFAULT_TIME_INTERVAL_MIN))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(frames)
}

pub fn load_dataset(path: &Path, units: Units) -> Result<Dataset> {
    read_dataset(fs::File::open(path)?, units)
}

/// Writes micrometer coordinates in shortest round-trip form.
pub fn write_dataset(dataset: &Dataset, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for f in &dataset.frames {
        for n in &f.nuclei {
            w.write_record([
                f.frame_index.to_string(),
                n.id.0.clone(),
                n.position.x.to_string(),
                n.position.y.to_string(),
                n.position.z.to_string(),
                n.phase.as_str().to_owned(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(dataset, &mut buf)?;
    write_atomic(path, &buf)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_version(found: u32, what: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "{what}: unsupported version {found} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneDoc {
    pub nx: f64,
    pub ny: f64,
    pub nz: f64,
}

impl From<&ProjectionPlane> for PlaneDoc {
    fn from(p: &ProjectionPlane) -> Self {
        let n = p.normal();
        Self {
            nx: n.x,
            ny: n.y,
            nz: n.z,
        }
    }
}

impl PlaneDoc {
    /// Stored unit normals are taken verbatim so round trips are exact.
    pub fn to_plane(self) -> Result<ProjectionPlane> {
        let n = Vec3::new(self.nx, self.ny, self.nz);
        if (n.norm() - 1.0).abs() < 1e-12 {
            return Ok(ProjectionPlane::from_unit(n));
        }
        ProjectionPlane::new(n)
    }
}

/// One frame's labels together with the plane they were charted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentDoc {
    pub version: u32,
    pub frame: usize,
    pub labels: BTreeMap<NucleusId, u8>,
    pub plane: PlaneDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroids: Option<Vec<[f64; 2]>>,
}

impl AssignmentDoc {
    pub fn new(assignment: &FileAssignment, plane: &ProjectionPlane) -> Self {
        Self {
            version: FORMAT_VERSION,
            frame: assignment.frame_index,
            labels: assignment.labels.clone(),
            plane: plane.into(),
            centroids: Some(assignment.centroids.iter().map(|c| [c.x, c.y]).collect()),
        }
    }

    pub fn into_parts(self) -> Result<(FileAssignment, ProjectionPlane)> {
        check_version(self.version, "assignment")?;
        if let Some((id, &l)) = self.labels.iter().find(|(_, &l)| l as usize >= NUM_FILES) {
            return Err(Error::Schema(format!(
                "frame {}: nucleus {id} has label {l}",
                self.frame
            )));
        }
        let centroids = match self.centroids {
            Some(c) if c.len() == NUM_FILES => c.into_iter().map(|[u, v]| Vec2::new(u, v)).collect(),
            Some(c) => {
                return Err(Error::Schema(format!(
                    "frame {}: {} centroids, expected {NUM_FILES}",
                    self.frame,
                    c.len()
                )))
            }
            None => vec![Vec2::zeros(); NUM_FILES],
        };
        let plane = self.plane.to_plane()?;
        Ok((
            FileAssignment {
                frame_index: self.frame,
                labels: self.labels,
                centroids,
            },
            plane,
        ))
    }
}

pub fn save_assignments(path: &Path, assignments: &[FileAssignment], planes: &[ProjectionPlane]) -> Result<()> {
    if assignments.len() != planes.len() {
        return Err(Error::DegenerateInput("one plane per assignment required".into()));
    }
    let docs: Vec<AssignmentDoc> = assignments
        .iter()
        .zip(planes)
        .map(|(a, p)| AssignmentDoc::new(a, p))
        .collect();
    write_json(path, &docs)
}

pub fn load_assignments(path: &Path) -> Result<(Vec<FileAssignment>, Vec<ProjectionPlane>)> {
    let docs: Vec<AssignmentDoc> = read_json(path)?;
    let mut asg = Vec::with_capacity(docs.len());
    let mut planes = Vec::with_capacity(docs.len());
    for (i, d) in docs.into_iter().enumerate() {
        if d.frame != i {
            return Err(Error::Schema(format!("assignment {i} is for frame {}", d.frame)));
        }
        let (a, p) = d.into_parts()?;
        asg.push(a);
        planes.push(p);
    }
    Ok((asg, planes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionsDoc {
    pub version: u32,
    pub entries: Vec<Correction>,
}

impl From<&CorrectionSet> for CorrectionsDoc {
    fn from(c: &CorrectionSet) -> Self {
        Self {
            version: FORMAT_VERSION,
            entries: c.entries().to_vec(),
        }
    }
}

impl TryFrom<CorrectionsDoc> for CorrectionSet {
    type Error = Error;

    fn try_from(d: CorrectionsDoc) -> Result<Self> {
        check_version(d.version, "corrections")?;
        CorrectionSet::new(d.entries)
    }
}

pub fn save_corrections(path: &Path, corrections: &CorrectionSet) -> Result<()> {
    write_json(path, &CorrectionsDoc::from(corrections))
}

pub fn load_corrections(path: &Path) -> Result<CorrectionSet> {
    read_json::<CorrectionsDoc>(path)?.try_into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDoc {
    /// Frame of the parent; children live in the next frame.
    pub frame: usize,
    pub parent: NucleusId,
    pub children: Vec<NucleusId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestDoc {
    pub version: u32,
    pub edges: Vec<EdgeDoc>,
}

impl From<&LineageForest> for ForestDoc {
    fn from(f: &LineageForest) -> Self {
        Self {
            version: FORMAT_VERSION,
            edges: f
                .edges()
                .iter()
                .map(|e| EdgeDoc {
                    frame: e.parent.frame,
                    parent: e.parent.id.clone(),
                    children: e.children.iter().map(|c| c.id.clone()).collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<ForestDoc> for LineageForest {
    type Error = Error;

    fn try_from(d: ForestDoc) -> Result<Self> {
        check_version(d.version, "forest")?;
        LineageForest::new(
            d.edges
                .into_iter()
                .map(|e| LineageEdge {
                    parent: NodeRef::new(e.frame, e.parent),
                    children: e.children.into_iter().map(|c| NodeRef::new(e.frame + 1, c)).collect(),
                })
                .collect(),
        )
    }
}

pub fn save_forest(path: &Path, forest: &LineageForest) -> Result<()> {
    write_json(path, &ForestDoc::from(forest))
}

pub fn load_forest(path: &Path) -> Result<LineageForest> {
    read_json::<ForestDoc>(path)?.try_into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrespondencesDoc {
    pub version: u32,
    pub pairs: Vec<FileCorrespondence>,
}

pub fn save_correspondences(path: &Path, pairs: &[FileCorrespondence]) -> Result<()> {
    write_json(
        path,
        &CorrespondencesDoc {
            version: FORMAT_VERSION,
            pairs: pairs.to_vec(),
        },
    )
}

pub fn load_correspondences(path: &Path) -> Result<Vec<FileCorrespondence>> {
    let d: CorrespondencesDoc = read_json(path)?;
    check_version(d.version, "correspondences")?;
    if let Some(p) = d.pairs.iter().find(|p| !p.is_bijection()) {
        return Err(Error::Schema(format!(
            "correspondence for frame {} is not a bijection",
            p.frame
        )));
    }
    Ok(d.pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthDoc {
    pub version: u32,
    pub truth: GroundTruth,
}

pub fn save_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    write_json(
        path,
        &TruthDoc {
            version: FORMAT_VERSION,
            truth: truth.clone(),
        },
    )
}

pub fn load_truth(path: &Path) -> Result<GroundTruth> {
    let d: TruthDoc = read_json(path)?;
    check_version(d.version, "truth")?;
    Ok(d.truth)
}

/// Tracking problems in a serializable shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiagnosticDoc {
    Reconciliation {
        file: u8,
        frame: usize,
        parents_left: usize,
        children_left: usize,
        message: String,
    },
    UnresolvedMitosis {
        file: u8,
        parent: NodeRef,
    },
}

impl From<&ReconciliationError> for DiagnosticDoc {
    fn from(e: &ReconciliationError) -> Self {
        DiagnosticDoc::Reconciliation {
            file: e.file_label,
            frame: e.frame_t,
            parents_left: e.parents_left,
            children_left: e.children_left,
            message: e.to_string(),
        }
    }
}

impl From<&LinkDiagnostic> for DiagnosticDoc {
    fn from(d: &LinkDiagnostic) -> Self {
        match d {
            LinkDiagnostic::UnresolvedMitosis { file_label, parent } => DiagnosticDoc::UnresolvedMitosis {
                file: *file_label,
                parent: parent.clone(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, preset, SyntheticConfig};

    const ONE_ROW: &str = "frame,id,x_um,y_um,z_um,phase\n0,a,1.5,2,3,non_mitotic\n";

    #[test]
    fn one_row_dataset() {
        let ds = read_dataset(ONE_ROW.as_bytes(), Units::Micrometers).unwrap();
        assert_eq!(ds.num_frames(), 1);
        let n = &ds.frames[0].nuclei[0];
        assert_eq!(n.position, Vec3::new(1.5, 2.0, 3.0));
        assert_eq!(n.phase, Phase::NonMitotic);
    }

    #[test]
    fn column_order_free_and_voxels_scaled() {
        let csv = "id,phase,frame,z_um,y_um,x_um\nq,mitotic,0,2,10,10\n";
        let ds = read_dataset(csv.as_bytes(), Units::default_voxels()).unwrap();
        let n = &ds.frames[0].nuclei[0];
        assert_eq!(n.position, Vec3::new(6.1, 6.1, 5.0));
        assert_eq!(n.phase, Phase::Mitotic);
    }

    fn err_line(csv: &str) -> (usize, String) {
        match read_dataset(csv.as_bytes(), Units::Micrometers) {
            Err(Error::Parse { line, msg }) => (line, msg),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_name_the_line() {
        let (line, msg) = err_line("frame,id,x_um,y_um,z_um,phase\n0,a,1,2,3,mitotic\n0,a,4,5,6,mitotic\n");
        assert_eq!(line, 3);
        assert!(msg.contains("duplicate"));
        let (line, _) = err_line("frame,id,x_um,y_um,z_um,phase\n0,a,1,2,3,mitotic\n0,b,1,NaN,3,mitotic\n");
        assert_eq!(line, 3);
        let (line, msg) = err_line("frame,id,x_um,y_um,z_um,phase\n0,a,1,2,3,dividing\n");
        assert_eq!(line, 2);
        assert!(msg.contains("phase"));
        let (line, msg) = err_line("frame,id,x_um,y_um,phase\n0,a,1,2,mitotic\n");
        assert_eq!(line, 1);
        assert!(msg.contains("z_um"));
    }

    #[test]
    fn missing_frame_rejected() {
        let csv = "frame,id,x_um,y_um,z_um,phase\n0,a,1,2,3,mitotic\n2,a,1,2,3,mitotic\n";
        assert!(read_dataset(csv.as_bytes(), Units::Micrometers).is_err());
    }

    #[test]
    fn synthetic_round_trip() {
        let cfg = SyntheticConfig {
            num_frames: 6,
            ..preset("rotating").unwrap()
        };
        let (ds, _) = generate(&cfg).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), Units::Micrometers).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn json_documents_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");

        let empty = CorrectionSet::default();
        save_corrections(&p, &empty).unwrap();
        assert_eq!(load_corrections(&p).unwrap(), empty);

        let forest = LineageForest::new(vec![
            LineageEdge {
                parent: NodeRef::new(0, "p"),
                children: vec![NodeRef::new(1, "a"), NodeRef::new(1, "b")],
            },
            LineageEdge {
                parent: NodeRef::new(1, "a"),
                children: vec![NodeRef::new(2, "a2")],
            },
        ])
        .unwrap();
        save_forest(&p, &forest).unwrap();
        assert_eq!(load_forest(&p).unwrap(), forest);

        let pairs = vec![FileCorrespondence::identity(0)];
        save_correspondences(&p, &pairs).unwrap();
        assert_eq!(load_correspondences(&p).unwrap(), pairs);

        let asg = FileAssignment {
            frame_index: 0,
            labels: [(NucleusId::from("x"), 3u8)].into_iter().collect(),
            centroids: (0..8).map(|i| Vec2::new(i as f64, 0.5)).collect(),
        };
        let plane = ProjectionPlane::new(Vec3::new(0.1, 1.0, 0.2)).unwrap();
        save_assignments(&p, std::slice::from_ref(&asg), &[plane]).unwrap();
        let (a, pl) = load_assignments(&p).unwrap();
        assert_eq!(a, vec![asg]);
        assert_eq!(pl[0], plane);
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"version": 7, "entries": []}"#).unwrap();
        assert!(matches!(load_corrections(&p), Err(Error::Schema(_))));
        fs::write(&p, r#"{"entries": []}"#).unwrap();
        assert!(load_corrections(&p).is_err());
        fs::write(&p, r#"{"version": 7, "edges": []}"#).unwrap();
        assert!(matches!(load_forest(&p), Err(Error::Schema(_))));
    }

    #[test]
    fn bad_label_in_document_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(
            &p,
            r#"{"version": 1, "entries": [{"frame": 0, "id": "a", "label": 8}]}"#,
        )
        .unwrap();
        assert!(load_corrections(&p).is_err());
    }

    #[test]
    fn checksum_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
