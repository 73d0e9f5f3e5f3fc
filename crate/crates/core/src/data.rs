//! Records, backbone featurization, PDB and FASTA I/O, synthetic corpora and
//! deterministic splits.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::fold::{fold_mfe, DotBracket, EnergyModel, MAX_FOLD_LEN};
use crate::layout::helix_layout;
use crate::metrics::{BackboneCoords, Point3};
use crate::rng::{self, Stream};
use crate::sequence::{parse_seq, seq_to_string, Base, BASES};
use crate::tensor::Mat;

pub const RBF_COUNT: usize = 16;
pub const RBF_MAX: f64 = 20.0;
const POSITION_FEATURES: usize = 3;
/// cos/sin/flag for the bond angle and for the dihedral.
const ANGLE_FEATURES: usize = 6;

/// Conditioning width for `k` neighbour slots.
pub fn feature_width(k: usize) -> usize {
    RBF_COUNT * k + POSITION_FEATURES + ANGLE_FEATURES
}

fn rbf_centres() -> [f64; RBF_COUNT] {
    std::array::from_fn(|m| RBF_MAX * m as f64 / (RBF_COUNT - 1) as f64)
}

const RBF_WIDTH: f64 = RBF_MAX / RBF_COUNT as f64;

/// Per-residue geometric features built from distances and angles only.
///
/// Each of the `k` nearest neighbours (by distance, ties by index) fills one
/// slot of 16 Gaussian radial basis values. When the chain has fewer than
/// `k + 1` residues the trailing slots are zero.
pub fn featurize_backbone(coords: &BackboneCoords, k: usize) -> Result<Mat> {
    let pts = coords.points();
    let n = pts.len();
    if n < 2 {
        return Err(invalid!("featurization needs at least 2 residues, got {n}"));
    }
    if k == 0 {
        return Err(invalid!("neighbour count must be positive"));
    }
    let filled = if k >= n {
        log::warn!("neighbour count {k} exceeds chain length {n}; using {}", n - 1);
        n - 1
    } else {
        k
    };
    let centres = rbf_centres();
    let width = feature_width(k);
    let mut out = Mat::zeros(n, width);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i).map(|j| ((pts[i] - pts[j]).norm(), j)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let row = out.row_mut(i);
        for (slot, &(d, _)) in order.iter().take(filled).enumerate() {
            for (m, c) in centres.iter().enumerate() {
                row[slot * RBF_COUNT + m] = (-((d - c) / RBF_WIDTH).powi(2)).exp();
            }
        }
        let base = RBF_COUNT * k;
        let pos = i as f64 / (n - 1) as f64;
        row[base] = pos;
        row[base + 1] = 1.0 - pos;
        row[base + 2] = n as f64 / MAX_FOLD_LEN as f64;
        let a = base + POSITION_FEATURES;
        if i > 0 && i + 1 < n {
            if let Some((c, s)) = bond_angle(pts[i - 1], pts[i], pts[i + 1]) {
                row[a] = c;
                row[a + 1] = s;
                row[a + 2] = 1.0;
            }
        }
        if i > 0 && i + 2 < n {
            if let Some((c, s)) = dihedral(pts[i - 1], pts[i], pts[i + 1], pts[i + 2]) {
                row[a + 3] = c;
                row[a + 4] = s;
                row[a + 5] = 1.0;
            }
        }
    }
    Ok(out)
}

const GEOM_EPS: f64 = 1e-9;

fn bond_angle(prev: Point3, cur: Point3, next: Point3) -> Option<(f64, f64)> {
    let u = prev - cur;
    let v = next - cur;
    let nu = u.norm();
    let nv = v.norm();
    if nu < GEOM_EPS || nv < GEOM_EPS {
        return None;
    }
    let c = (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0);
    Some((c, (1.0 - c * c).sqrt()))
}

fn dihedral(p0: Point3, p1: Point3, p2: Point3, p3: Point3) -> Option<(f64, f64)> {
    let b0 = p0 - p1;
    let b1 = p2 - p1;
    let b2 = p3 - p2;
    let nb1 = b1.norm();
    if nb1 < GEOM_EPS {
        return None;
    }
    let b1n = b1 / nb1;
    let v = b0 - b1n * b0.dot(&b1n);
    let w = b2 - b1n * b2.dot(&b1n);
    let (nv, nw) = (v.norm(), w.norm());
    if nv < GEOM_EPS || nw < GEOM_EPS {
        return None;
    }
    let x = v.dot(&w) / (nv * nw);
    let y = b1n.cross(&v).dot(&w) / (nv * nw);
    Some((x, y))
}

/// One design target: a native sequence and its backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct RnaRecord {
    pub id: String,
    pub sequence: Vec<Base>,
    pub coords: BackboneCoords,
    pub truth_db: DotBracket,
    pub features: Mat,
}

impl RnaRecord {
    /// Builds a record, computing conditioning features with `k` neighbours.
    pub fn new(
        id: impl Into<String>,
        sequence: Vec<Base>,
        coords: BackboneCoords,
        truth_db: DotBracket,
        k: usize,
    ) -> Result<Self> {
        let id = id.into();
        let n = sequence.len();
        if n == 0 || n > MAX_FOLD_LEN {
            return Err(Error::Filtered(format!(
                "{id}: length {n} outside 1..={MAX_FOLD_LEN}"
            )));
        }
        if coords.len() != n || truth_db.len() != n {
            return Err(invalid!(
                "{id}: sequence length {n}, {} coordinates, structure length {}",
                coords.len(),
                truth_db.len()
            ));
        }
        let features = featurize_backbone(&coords, k)?;
        Ok(RnaRecord {
            id,
            sequence,
            coords,
            truth_db,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn sequence_string(&self) -> String {
        seq_to_string(&self.sequence)
    }
}

/// Chain extracted from a PDB file, before featurization.
#[derive(Debug, Clone, PartialEq)]
pub struct PdbChain {
    pub sequence: Vec<Base>,
    pub coords: BackboneCoords,
}

const IGNORED_HETERO: [&str; 10] = ["HOH", "WAT", "DOD", "MG", "NA", "K", "CL", "ZN", "MN", "CA"];

fn column(line: &str, from: usize, to: usize) -> &str {
    // 1-based inclusive columns; short lines yield what is there.
    let bytes = line.as_bytes();
    let end = to.min(bytes.len());
    if from > end {
        return "";
    }
    std::str::from_utf8(&bytes[from - 1..end]).unwrap_or("")
}

/// Extracts the C4′ trace of `chain` from fixed-column PDB text. Only the
/// first model is read; alternate locations other than blank or `A` are
/// skipped.
pub fn parse_pdb_backbone(text: &str, chain: char) -> Result<PdbChain> {
    struct Residue {
        label: String,
        base: Base,
        c4: Option<Point3>,
    }
    let mut residues: Vec<Residue> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        let record = column(line, 1, 6);
        if record.starts_with("ENDMDL") {
            break;
        }
        let hetero = record == "HETATM";
        if record != "ATOM  " && record != "ATOM" && !hetero {
            continue;
        }
        if !line.is_ascii() {
            return Err(Error::Parse {
                line: line_no,
                msg: "non-ASCII characters in coordinate record".into(),
            });
        }
        if line.len() < 54 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("coordinate record has {} columns, need 54", line.len()),
            });
        }
        if !column(line, 22, 22).starts_with(chain) {
            continue;
        }
        let res_name = column(line, 18, 20).trim();
        if hetero && IGNORED_HETERO.contains(&res_name) {
            continue;
        }
        let alt = column(line, 17, 17);
        if alt != " " && alt != "A" {
            continue;
        }
        let res_seq = column(line, 23, 26).trim();
        if res_seq.parse::<i64>().is_err() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("residue number {res_seq:?} is not an integer"),
            });
        }
        let label = format!("{res_name}{res_seq}{}", column(line, 27, 27).trim());
        let slot = match index.get(&label) {
            Some(&s) => s,
            None => {
                let base = match res_name {
                    "A" | "U" | "C" | "G" => Base::from_char(res_name.chars().next().unwrap_or('?'))
                        .ok_or_else(|| Error::Filtered(format!("residue {label}")))?,
                    other => {
                        return Err(Error::Filtered(format!(
                            "chain {chain} contains non-standard residue {other} ({label}) at line {line_no}"
                        )))
                    }
                };
                residues.push(Residue {
                    label: label.clone(),
                    base,
                    c4: None,
                });
                index.insert(label, residues.len() - 1);
                residues.len() - 1
            }
        };
        let atom = column(line, 13, 16).trim();
        if atom == "C4'" || atom == "C4*" {
            let mut xyz = [0.0; 3];
            for (d, (from, to)) in xyz.iter_mut().zip([(31, 38), (39, 46), (47, 54)]) {
                let field = column(line, from, to).trim();
                *d = field.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("coordinate field {field:?} in columns {from}-{to} is not a number"),
                })?;
            }
            if residues[slot].c4.is_none() {
                residues[slot].c4 = Some(Point3::new(xyz[0], xyz[1], xyz[2]));
            }
        }
    }
    if residues.is_empty() {
        return Err(Error::Filtered(format!("no nucleotide residues in chain {chain}")));
    }
    if residues.len() > MAX_FOLD_LEN {
        return Err(Error::Filtered(format!(
            "chain {chain} has {} residues, limit is {MAX_FOLD_LEN}",
            residues.len()
        )));
    }
    let mut sequence = Vec::with_capacity(residues.len());
    let mut points = Vec::with_capacity(residues.len());
    for r in residues {
        let p = r.c4.ok_or(Error::MissingAtom { residue: r.label })?;
        sequence.push(r.base);
        points.push(p);
    }
    Ok(PdbChain {
        sequence,
        coords: BackboneCoords::new(points)?,
    })
}

/// Writes a C4′-only chain `A` in fixed-column PDB format.
pub fn write_pdb(seq: &[Base], coords: &BackboneCoords) -> Result<String> {
    if seq.len() != coords.len() {
        return Err(invalid!(
            "sequence length {} differs from {} coordinates",
            seq.len(),
            coords.len()
        ));
    }
    let mut s = String::new();
    for (i, (b, p)) in seq.iter().zip(coords.points()).enumerate() {
        let _ = writeln!(
            s,
            "ATOM  {:>5} {:<4} {:>3} A{:>4}    {:>8.3}{:>8.3}{:>8.3}{:>6.2}{:>6.2}           C",
            i + 1,
            " C4'",
            b.as_char(),
            i + 1,
            p.x,
            p.y,
            p.z,
            1.0,
            0.0
        );
    }
    s.push_str("END\n");
    Ok(s)
}

/// Parses FASTA text into `(id, sequence)` pairs. Lower-case input is
/// accepted and `T` is read as `U`.
pub fn read_fasta(text: &str) -> Result<Vec<(String, Vec<Base>)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let id = header.split_whitespace().next().unwrap_or("").to_string();
            out.push((id, String::new(), ln + 1));
        } else {
            let Some(last) = out.last_mut() else {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: "sequence data before the first '>' header".into(),
                });
            };
            last.1.extend(line.chars().map(|c| match c.to_ascii_uppercase() {
                'T' => 'U',
                c => c,
            }));
        }
    }
    out.into_iter()
        .map(|(id, s, line)| {
            let seq = parse_seq(&s).map_err(|e| Error::Parse {
                line,
                msg: format!("record {id}: {e}"),
            })?;
            if seq.is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: format!("record {id} has an empty sequence"),
                });
            }
            Ok((id, seq))
        })
        .collect()
}

pub fn write_fasta<'a>(records: impl IntoIterator<Item = (&'a str, &'a [Base])>) -> String {
    let mut s = String::new();
    for (id, seq) in records {
        let _ = writeln!(s, ">{id}\n{}", seq_to_string(seq));
    }
    s
}

/// Settings for [`gen_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub neighbors: usize,
    /// Standard deviation in Å of Gaussian noise added to every coordinate.
    pub coord_noise: Option<f64>,
}

/// Random sequences with their folded structures and surrogate backbones.
pub fn gen_synthetic(cfg: &SynthConfig, em: &impl EnergyModel, seed: u64) -> Result<Vec<RnaRecord>> {
    if cfg.count == 0 {
        return Err(invalid!("synthetic corpus needs at least one record"));
    }
    if cfg.min_len < 2 || cfg.min_len > cfg.max_len || cfg.max_len > MAX_FOLD_LEN {
        return Err(invalid!(
            "length range [{}, {}] must satisfy 2 <= min <= max <= {MAX_FOLD_LEN}",
            cfg.min_len,
            cfg.max_len
        ));
    }
    if let Some(s) = cfg.coord_noise {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(invalid!("coordinate noise must be a finite non-negative number"));
        }
    }
    let mut r = rng::substream(seed, Stream::Data);
    let width = (cfg.count as f64).log10().floor() as usize + 1;
    let mut out = Vec::with_capacity(cfg.count);
    for idx in 0..cfg.count {
        let len = r.random_range(cfg.min_len..=cfg.max_len);
        let seq: Vec<Base> = (0..len).map(|_| BASES[r.random_range(0..4)]).collect();
        let fold = fold_mfe(&seq, em)?;
        let mut coords = helix_layout(&fold.structure);
        if let Some(sd) = cfg.coord_noise {
            for p in coords.0.iter_mut() {
                for v in p.iter_mut() {
                    *v += sd * rng::normal(&mut r);
                }
            }
        }
        out.push(RnaRecord::new(
            format!("syn{idx:0width$}"),
            seq,
            coords,
            fold.structure,
            cfg.neighbors,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Finetune,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Finetune, Split::Test];

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Finetune => "finetune",
            Split::Test => "test",
        }
    }

    pub fn from_label(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.label() == s)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<RnaRecord>,
    pub finetune: Vec<RnaRecord>,
    pub test: Vec<RnaRecord>,
}

impl Splits {
    pub fn get(&self, s: Split) -> &[RnaRecord] {
        match s {
            Split::Train => &self.train,
            Split::Finetune => &self.finetune,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, s: Split) -> &mut Vec<RnaRecord> {
        match s {
            Split::Train => &mut self.train,
            Split::Finetune => &mut self.finetune,
            Split::Test => &mut self.test,
        }
    }
}

/// Target split sizes by largest remainder, each at least one.
fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let total: f64 = ratios.iter().sum();
    let raw: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut sizes: [usize; 3] = std::array::from_fn(|i| raw[i].floor() as usize);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        if sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).unwrap_or(0);
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    sizes
}

/// Partitions records into train, fine-tune and test sets. Records with the
/// same sequence string always land in the same split.
pub fn split_dataset(records: Vec<RnaRecord>, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(invalid!("split ratios must be positive, got {ratios:?}"));
    }
    let mut groups: Vec<Vec<RnaRecord>> = Vec::new();
    let mut by_seq: HashMap<String, usize> = HashMap::new();
    for rec in records {
        let key = rec.sequence_string();
        match by_seq.get(&key) {
            Some(&g) => groups[g].push(rec),
            None => {
                by_seq.insert(key, groups.len());
                groups.push(vec![rec]);
            }
        }
    }
    if groups.len() < 3 {
        return Err(invalid!(
            "need at least 3 distinct sequences to fill 3 splits, got {}",
            groups.len()
        ));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let targets = split_sizes(n, ratios);
    let mut r = rng::substream(seed, Stream::Data);
    groups.shuffle(&mut r);
    let mut counts = [0usize; 3];
    let mut assigned: Vec<usize> = Vec::with_capacity(groups.len());
    // The first three groups seed one split each so none stays empty.
    for (g, group) in groups.iter().enumerate() {
        let s = if g < 3 {
            g
        } else {
            (0..3)
                .max_by(|&a, &b| {
                    let da = targets[a] as f64 - counts[a] as f64;
                    let db = targets[b] as f64 - counts[b] as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .unwrap_or(0)
        };
        counts[s] += group.len();
        assigned.push(s);
    }
    let mut out = Splits::default();
    for (group, s) in groups.into_iter().zip(assigned) {
        out.get_mut(Split::ALL[s]).extend(group);
    }
    for s in Split::ALL {
        out.get_mut(s).sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tsequence\tcoords\tsplit";

/// Writes one PDB per record under `dir/coords` plus a tab-separated
/// manifest. Returns the paths written.
pub fn write_dataset(dir: &Path, splits: &Splits) -> Result<Vec<PathBuf>> {
    let coord_dir = dir.join("coords");
    std::fs::create_dir_all(&coord_dir).map_err(|e| Error::io(&coord_dir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    let mut written = Vec::new();
    for s in Split::ALL {
        for rec in splits.get(s) {
            let rel = format!("coords/{}.pdb", rec.id);
            let path = dir.join(&rel);
            std::fs::write(&path, write_pdb(&rec.sequence, &rec.coords)?)
                .map_err(|e| Error::io(&path, e))?;
            written.push(path);
            let _ = writeln!(manifest, "{}\t{}\t{rel}\t{}", rec.id, rec.sequence_string(), s.label());
        }
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Reads a dataset written by [`write_dataset`]. Structures are recomputed
/// with `em`; features use `k` neighbours.
pub fn read_dataset(dir: &Path, em: &impl EnergyModel, k: usize) -> Result<Splits> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Splits::default();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line != MANIFEST_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("manifest header should be {MANIFEST_HEADER:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| Error::Parse { line: ln + 1, msg };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let split = Split::from_label(fields[3])
            .ok_or_else(|| bad(format!("unknown split {:?}", fields[3])))?;
        let seq = parse_seq(fields[1]).map_err(|e| bad(e.to_string()))?;
        let pdb_path = dir.join(fields[2]);
        let pdb = std::fs::read_to_string(&pdb_path).map_err(|e| Error::io(&pdb_path, e))?;
        let chain = parse_pdb_backbone(&pdb, 'A')?;
        if chain.sequence != seq {
            return Err(bad(format!("{} does not match the manifest sequence", fields[2])));
        }
        let db = fold_mfe(&seq, em)?.structure;
        out.get_mut(split)
            .push(RnaRecord::new(fields[0], seq, chain.coords, db, k)?);
    }
    if Split::ALL.iter().all(|s| out.get(*s).is_empty()) {
        return Err(Error::Parse {
            line: 1,
            msg: "manifest lists no records".into(),
        });
    }
    Ok(out)
}
