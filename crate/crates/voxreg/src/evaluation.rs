//! Overlap and deformation-quality metrics for registered segmentations:
//! per-region Dice, the inverse-volume weighted Dice that keeps small
//! structures from vanishing behind large ones, tissue-level aggregation,
//! Jacobian-determinant statistics (folding percentage and average absolute
//! log determinant), and win-fraction comparison between two methods.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transforms::{jacobian_determinant, DisplacementField};
use crate::volume::{GridGeometry, LabelVolume};

/// Default region taxonomy: FreeSurfer-style label ids as emitted by
/// SynthSeg-like segmenters, left/right hemispheres merged per region.
const DEFAULT_REGIONS: &str = include_str!("../data/synthseg_regions.csv");

const GEOMETRY_TOL: f64 = 1e-9;

fn require_same_grid(a: &GridGeometry, b: &GridGeometry) -> Result<()> {
    if !a.approx_eq(b, GEOMETRY_TOL) {
        return Err(Error::Shape("segmentations live on different grids".into()));
    }
    Ok(())
}

/// Coarse tissue class a region belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tissue {
    WM,
    GM,
    CSF,
}

impl Tissue {
    pub const ALL: [Tissue; 3] = [Tissue::WM, Tissue::GM, Tissue::CSF];

    pub fn name(&self) -> &'static str {
        match self {
            Tissue::WM => "WM",
            Tissue::GM => "GM",
            Tissue::CSF => "CSF",
        }
    }
}

impl std::str::FromStr for Tissue {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "WM" => Ok(Tissue::WM),
            "GM" => Ok(Tissue::GM),
            "CSF" => Ok(Tissue::CSF),
            other => Err(Error::InvalidInput(format!(
                "unknown tissue {other:?}; expected WM, GM, or CSF"
            ))),
        }
    }
}

/// One scored region: the label ids that make it up (left/right merged by
/// id-set union), its name, and its tissue class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionEntry {
    pub label_ids: Vec<u32>,
    pub region_name: String,
    pub tissue: Tissue,
}

/// The set of regions a segmentation is scored over.
#[derive(Debug, Clone)]
pub struct RegionTable {
    pub entries: Vec<RegionEntry>,
}

impl RegionTable {
    /// The built-in 18-region table.
    pub fn default_table() -> RegionTable {
        RegionTable::from_reader(DEFAULT_REGIONS.as_bytes())
            .expect("embedded region table is well-formed")
    }

    /// Parses a table from delimited text with a header line and columns
    /// `label_ids` (semicolon-separated integers), `region_name`, `tissue`.
    pub fn from_reader(reader: impl Read) -> Result<RegionTable> {
        let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut entries = Vec::new();
        for record in csv_reader.records() {
            let record = record.map_err(|e| Error::InvalidInput(format!("region table: {e}")))?;
            if record.len() != 3 {
                return Err(Error::InvalidInput(format!(
                    "region table rows need 3 columns, got {}",
                    record.len()
                )));
            }
            let mut label_ids = Vec::new();
            for part in record[0].split(';') {
                let id = part.trim().parse::<u32>().map_err(|_| {
                    Error::InvalidInput(format!("bad label id {:?} in region table", part))
                })?;
                label_ids.push(id);
            }
            entries.push(RegionEntry {
                label_ids,
                region_name: record[1].trim().to_string(),
                tissue: record[2].parse()?,
            });
        }
        let table = RegionTable { entries };
        table.validate()?;
        Ok(table)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<RegionTable> {
        let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        RegionTable::from_reader(file)
    }

    /// Serializes in the format [`from_reader`](Self::from_reader) parses.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("label_ids,region_name,tissue\n");
        for entry in &self.entries {
            let ids: Vec<String> = entry.label_ids.iter().map(u32::to_string).collect();
            out.push_str(&format!(
                "{},{},{}\n",
                ids.join(";"),
                entry.region_name,
                entry.tissue.name()
            ));
        }
        out
    }

    /// Structural checks: at least one region, non-empty disjoint id sets.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidInput("region table has no entries".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for entry in &self.entries {
            if entry.label_ids.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "region {:?} has no label ids",
                    entry.region_name
                )));
            }
            for &id in &entry.label_ids {
                if !seen.insert(id) {
                    return Err(Error::InvalidInput(format!(
                        "label id {id} appears in more than one region"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Index from label id to position in `entries`.
    fn label_lookup(&self) -> BTreeMap<u32, usize> {
        let mut map = BTreeMap::new();
        for (i, entry) in self.entries.iter().enumerate() {
            for &id in &entry.label_ids {
                map.insert(id, i);
            }
        }
        map
    }
}

// ---------------------------------------------------------------------------
// Dice family
// ---------------------------------------------------------------------------

/// Dice overlap of one region (a set of label ids) between two
/// segmentations: 2·|F ∩ M| / (|F| + |M|). Both masks empty scores 1.0
/// (nothing to get wrong), exactly one empty scores 0.0.
pub fn dice(fixed: &LabelVolume, moved: &LabelVolume, region: &[u32]) -> Result<f64> {
    require_same_grid(&fixed.geometry, &moved.geometry)?;
    let mut in_f = 0usize;
    let mut in_m = 0usize;
    let mut inter = 0usize;
    for (f, m) in fixed.data.iter().zip(&moved.data) {
        let ff = region.contains(f);
        let mm = region.contains(m);
        in_f += ff as usize;
        in_m += mm as usize;
        inter += (ff && mm) as usize;
    }
    Ok(dice_from_counts(in_f, in_m, inter))
}

fn dice_from_counts(in_f: usize, in_m: usize, inter: usize) -> f64 {
    if in_f + in_m == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (in_f + in_m) as f64
    }
}

/// Per-region counts (fixed size, moved size, intersection) for every table
/// entry in one pass over the volumes.
fn region_counts(
    fixed: &LabelVolume,
    moved: &LabelVolume,
    table: &RegionTable,
) -> Result<Vec<(usize, usize, usize)>> {
    require_same_grid(&fixed.geometry, &moved.geometry)?;
    let lookup = table.label_lookup();
    let mut counts = vec![(0usize, 0usize, 0usize); table.entries.len()];
    for (f, m) in fixed.data.iter().zip(&moved.data) {
        let rf = lookup.get(f);
        let rm = lookup.get(m);
        if let Some(&i) = rf {
            counts[i].0 += 1;
        }
        if let Some(&i) = rm {
            counts[i].1 += 1;
        }
        if let (Some(&i), Some(&j)) = (rf, rm) {
            if i == j {
                counts[i].2 += 1;
            }
        }
    }
    Ok(counts)
}

/// Weighted Dice: Σ_r w_r · Dice_r with raw weights W_r = 1/V_r, where V_r
/// is region r's voxel count in the *fixed* segmentation, normalized so the
/// w_r sum to one. Small structures therefore count as much as large ones.
/// Regions empty in the fixed segmentation are excluded from both sums.
pub fn weighted_dice(
    fixed: &LabelVolume,
    moved: &LabelVolume,
    table: &RegionTable,
) -> Result<f64> {
    let counts = region_counts(fixed, moved, table)?;
    let mut weight_sum = 0.0;
    let mut acc = 0.0;
    for &(in_f, in_m, inter) in &counts {
        if in_f == 0 {
            continue;
        }
        let w = 1.0 / in_f as f64;
        weight_sum += w;
        acc += w * dice_from_counts(in_f, in_m, inter);
    }
    if weight_sum == 0.0 {
        return Err(Error::Degenerate(
            "every region is empty in the fixed segmentation".into(),
        ));
    }
    Ok(acc / weight_sum)
}

/// Per-tissue unweighted means of region Dice, plus the mean over all
/// regions.
#[derive(Debug, Clone)]
pub struct TissueDice {
    pub per_tissue: Vec<(Tissue, f64)>,
    pub mean_dice: f64,
}

/// Averages per-region Dice within each tissue class (unweighted), and
/// across the whole table.
pub fn tissue_dice(
    fixed: &LabelVolume,
    moved: &LabelVolume,
    table: &RegionTable,
) -> Result<TissueDice> {
    let counts = region_counts(fixed, moved, table)?;
    let scores: Vec<f64> =
        counts.iter().map(|&(f, m, i)| dice_from_counts(f, m, i)).collect();
    let mut per_tissue = Vec::new();
    for tissue in Tissue::ALL {
        let members: Vec<f64> = table
            .entries
            .iter()
            .zip(&scores)
            .filter(|(e, _)| e.tissue == tissue)
            .map(|(_, &s)| s)
            .collect();
        if !members.is_empty() {
            per_tissue.push((tissue, members.iter().sum::<f64>() / members.len() as f64));
        }
    }
    let mean_dice = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(TissueDice { per_tissue, mean_dice })
}

/// Mean Dice across every region of the table.
pub fn mean_dice(fixed: &LabelVolume, moved: &LabelVolume, table: &RegionTable) -> Result<f64> {
    Ok(tissue_dice(fixed, moved, table)?.mean_dice)
}

// ---------------------------------------------------------------------------
// Jacobian-determinant statistics
// ---------------------------------------------------------------------------

/// Optional evaluation mask: the voxels of `labels` carrying any of the
/// listed ids.
pub type MaskSpec<'a> = Option<(&'a LabelVolume, &'a [u32])>;

fn masked_indices(field_geom: &GridGeometry, mask: MaskSpec) -> Result<Option<Vec<bool>>> {
    match mask {
        None => Ok(None),
        Some((labels, ids)) => {
            require_same_grid(field_geom, &labels.geometry)?;
            let flags: Vec<bool> = labels.data.iter().map(|l| ids.contains(l)).collect();
            if !flags.iter().any(|&f| f) {
                return Err(Error::Degenerate("evaluation mask is empty".into()));
            }
            Ok(Some(flags))
        }
    }
}

/// Percentage of voxels (within the mask, or the whole grid) whose local
/// Jacobian determinant is negative — the folding measure.
pub fn negative_jd_pct(field: &DisplacementField, mask: MaskSpec) -> Result<f64> {
    let jd = jacobian_determinant(field)?;
    let flags = masked_indices(&field.geometry, mask)?;
    let mut total = 0usize;
    let mut negative = 0usize;
    for (i, &d) in jd.data.iter().enumerate() {
        if flags.as_ref().map_or(true, |f| f[i]) {
            total += 1;
            negative += (d < 0.0) as usize;
        }
    }
    Ok(100.0 * negative as f64 / total as f64)
}

/// Average of |ln JD| over the masked voxels (or the whole grid): 0 for any
/// volume-preserving map, growing with local expansion or compression.
/// Requires a fold-free field on the mask; gate on [`negative_jd_pct`]
/// first.
pub fn abs_log_jd(field: &DisplacementField, mask: MaskSpec) -> Result<f64> {
    let jd = jacobian_determinant(field)?;
    let flags = masked_indices(&field.geometry, mask)?;
    let mut total = 0usize;
    let mut acc = 0.0;
    for (i, &d) in jd.data.iter().enumerate() {
        if flags.as_ref().map_or(true, |f| f[i]) {
            if d <= 0.0 {
                return Err(Error::NonInvertibleField(format!(
                    "Jacobian determinant {d} at voxel {i} inside the evaluation mask"
                )));
            }
            total += 1;
            acc += d.ln().abs();
        }
    }
    Ok(acc / total as f64)
}

// ---------------------------------------------------------------------------
// Method comparison
// ---------------------------------------------------------------------------

/// Win counting between two methods scored on the same pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Fraction of pairs where method A strictly beats method B; ties count
    /// toward the denominator but neither numerator.
    pub win_fraction_a: f64,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    pub total: usize,
}

/// Compares two per-pair score maps (higher is better), requiring the same
/// key set.
pub fn compare_methods(
    scores_a: &BTreeMap<String, f64>,
    scores_b: &BTreeMap<String, f64>,
) -> Result<Comparison> {
    if scores_a.len() != scores_b.len()
        || scores_a.keys().any(|k| !scores_b.contains_key(k))
    {
        return Err(Error::InvalidInput(
            "method comparison needs identical pair keys".into(),
        ));
    }
    if scores_a.is_empty() {
        return Err(Error::Degenerate("method comparison over zero pairs".into()));
    }
    let mut wins_a = 0usize;
    let mut wins_b = 0usize;
    let mut ties = 0usize;
    for (key, &a) in scores_a {
        let b = scores_b[key];
        if a > b {
            wins_a += 1;
        } else if b > a {
            wins_b += 1;
        } else {
            ties += 1;
        }
    }
    let total = scores_a.len();
    Ok(Comparison {
        win_fraction_a: wins_a as f64 / total as f64,
        wins_a,
        wins_b,
        ties,
        total,
    })
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Every metric for one registered pair, in the fixed column order used by
/// the CSV serialization (see [`MetricsReport::csv_header`]).
#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// (region name, Dice), in table order.
    pub per_region_dice: Vec<(String, f64)>,
    pub weighted_dice: f64,
    /// (tissue, mean Dice), in WM/GM/CSF order.
    pub tissue_dice: Vec<(Tissue, f64)>,
    pub mean_dice: f64,
    pub negative_jd_pct: f64,
    /// Average |ln JD| over the union of all table regions.
    pub abs_log_jd_whole: f64,
    /// (tissue, average |ln JD| over that tissue's regions).
    pub abs_log_jd_tissue: Vec<(Tissue, f64)>,
    /// (region name, average |ln JD|), in table order.
    pub abs_log_jd_region: Vec<(String, f64)>,
    /// (stage name, seconds); reported separately from the metric columns.
    pub timings: Vec<(String, f64)>,
}

impl MetricsReport {
    /// Scores a registered pair: overlap metrics between the fixed
    /// segmentation and the moved (warped) segmentation, and deformation
    /// statistics of the field, masked to the table's regions on the fixed
    /// side. A fold inside those regions shows up as a positive
    /// `negative_jd_pct` with NaN |ln JD| columns rather than an error.
    pub fn compute(
        fixed_seg: &LabelVolume,
        moved_seg: &LabelVolume,
        field: &DisplacementField,
        table: &RegionTable,
    ) -> Result<MetricsReport> {
        require_same_grid(&fixed_seg.geometry, &field.geometry)?;
        let counts = region_counts(fixed_seg, moved_seg, table)?;
        let per_region_dice: Vec<(String, f64)> = table
            .entries
            .iter()
            .zip(&counts)
            .map(|(e, &(f, m, i))| (e.region_name.clone(), dice_from_counts(f, m, i)))
            .collect();
        let weighted = weighted_dice(fixed_seg, moved_seg, table)?;
        let tissues = tissue_dice(fixed_seg, moved_seg, table)?;

        let all_ids: Vec<u32> =
            table.entries.iter().flat_map(|e| e.label_ids.iter().copied()).collect();
        let negative = negative_jd_pct(field, Some((fixed_seg, &all_ids)))?;
        // |ln JD| is undefined where the field folds and meaningless for a
        // mask the fixed segmentation never realizes; both report as NaN so
        // the row survives with `negative_jd_pct` flagging the former.
        let masked_alj = |ids: &[u32]| match abs_log_jd(field, Some((fixed_seg, ids))) {
            Ok(v) => Ok(v),
            Err(Error::Degenerate(_)) | Err(Error::NonInvertibleField(_)) => Ok(f64::NAN),
            Err(e) => Err(e),
        };
        let abs_log_jd_whole = masked_alj(&all_ids)?;
        let mut abs_log_jd_tissue = Vec::new();
        for tissue in Tissue::ALL {
            let ids: Vec<u32> = table
                .entries
                .iter()
                .filter(|e| e.tissue == tissue)
                .flat_map(|e| e.label_ids.iter().copied())
                .collect();
            if ids.is_empty() {
                continue;
            }
            abs_log_jd_tissue.push((tissue, masked_alj(&ids)?));
        }
        let mut abs_log_jd_region = Vec::new();
        for entry in &table.entries {
            abs_log_jd_region.push((entry.region_name.clone(), masked_alj(&entry.label_ids)?));
        }
        Ok(MetricsReport {
            per_region_dice,
            weighted_dice: weighted,
            tissue_dice: tissues.per_tissue,
            mean_dice: tissues.mean_dice,
            negative_jd_pct: negative,
            abs_log_jd_whole,
            abs_log_jd_tissue,
            abs_log_jd_region,
            timings: Vec::new(),
        })
    }

    /// Column names of the metric CSV block, fixed order: weighted and mean
    /// Dice, tissue Dice, per-region Dice (table order), folding
    /// percentage, then the |ln JD| averages (whole, tissues, regions).
    /// Tissue columns appear only for tissues the table actually contains.
    /// Timings are not metric columns; they serialize separately.
    pub fn csv_header(table: &RegionTable) -> Vec<String> {
        let present =
            |t: Tissue| table.entries.iter().any(|e| e.tissue == t);
        let mut cols = vec!["weighted_dice".to_string(), "mean_dice".to_string()];
        for tissue in Tissue::ALL.into_iter().filter(|&t| present(t)) {
            cols.push(format!("dice_{}", tissue.name().to_lowercase()));
        }
        for entry in &table.entries {
            cols.push(format!("dice_{}", slug(&entry.region_name)));
        }
        cols.push("negative_jd_pct".to_string());
        cols.push("abs_log_jd_whole".to_string());
        for tissue in Tissue::ALL.into_iter().filter(|&t| present(t)) {
            cols.push(format!("abs_log_jd_{}", tissue.name().to_lowercase()));
        }
        for entry in &table.entries {
            cols.push(format!("abs_log_jd_{}", slug(&entry.region_name)));
        }
        cols
    }

    /// Values matching [`csv_header`](Self::csv_header) one for one.
    pub fn csv_row(&self) -> Vec<f64> {
        let mut row = vec![self.weighted_dice, self.mean_dice];
        row.extend(self.tissue_dice.iter().map(|&(_, v)| v));
        row.extend(self.per_region_dice.iter().map(|&(_, v)| v));
        row.push(self.negative_jd_pct);
        row.push(self.abs_log_jd_whole);
        row.extend(self.abs_log_jd_tissue.iter().map(|&(_, v)| v));
        row.extend(self.abs_log_jd_region.iter().map(|&(_, v)| v));
        row
    }
}

fn slug(name: &str) -> String {
    name.to_lowercase().replace([' ', '-'], "_")
}
