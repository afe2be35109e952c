//! Pairing plans: random coarse rounds and the three fine-grained rules
//! (same content and distortion type, same content and distortion level,
//! same MOS interval).

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{hex_digest, DatasetManifest, ImageRecord};

pub const DEFAULT_ROUNDS: u32 = 12;
pub const DEFAULT_MOS_BOUNDS: [f64; 5] = [0.0, 25.0, 50.0, 75.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    CoarseRounds,
    FineSameContentType,
    FineSameContentLevel,
    FineMosInterval,
}

impl std::str::FromStr for PlanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" | "coarse_rounds" => Ok(PlanKind::CoarseRounds),
            "type" | "fine_same_content_type" => Ok(PlanKind::FineSameContentType),
            "level" | "fine_same_content_level" => Ok(PlanKind::FineSameContentLevel),
            "mos" | "interval" | "fine_mos_interval" => Ok(PlanKind::FineMosInterval),
            other => Err(Error::invalid(format!("unknown plan kind `{other}`"))),
        }
    }
}

/// One logical pair; both presentation orders are queried for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedPair {
    pub round: u32,
    pub a: String,
    pub b: String,
    /// Report group for fine-grained plans ("JPEG", "Level-3", "[25,50)").
    pub cell: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairingPlan {
    pub kind: PlanKind,
    pub pairs: Vec<PlannedPair>,
    pub seed: u64,
    pub rounds: Option<u32>,
    pub bounds: Option<Vec<f64>>,
    /// Diagnostics, e.g. cells skipped for having a single member.
    pub notes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PlanLine<'a> {
    round: u32,
    a: std::borrow::Cow<'a, str>,
    b: std::borrow::Cow<'a, str>,
    kind: PlanKind,
    cell: Option<std::borrow::Cow<'a, str>>,
}

impl PairingPlan {
    fn empty(kind: PlanKind) -> Self {
        Self {
            kind,
            pairs: Vec::new(),
            seed: 0,
            rounds: None,
            bounds: None,
            notes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of rounds spanned by the plan.
    pub fn max_round(&self) -> u32 {
        self.pairs.iter().map(|p| p.round).max().unwrap_or(0)
    }

    /// The leading pairs whose round is at most `rounds`.
    pub fn truncated(&self, rounds: u32) -> Self {
        Self {
            pairs: self.pairs.iter().filter(|p| p.round <= rounds).cloned().collect(),
            rounds: self.rounds.map(|r| r.min(rounds)),
            ..self.clone()
        }
    }

    /// Pair index → cell label, for per-cell reports.
    pub fn cells(&self) -> BTreeMap<usize, String> {
        self.pairs
            .iter()
            .enumerate()
            .filter_map(|(k, p)| p.cell.clone().map(|c| (k, c)))
            .collect()
    }

    /// Checks that every id resolves and no pair compares an image with itself.
    pub fn validate_against(&self, manifest: &DatasetManifest) -> Result<()> {
        let ids: HashSet<&str> = manifest.images.iter().map(|i| i.id.as_str()).collect();
        for p in &self.pairs {
            if p.a == p.b {
                return Err(Error::invalid(format!("self pair ({}, {})", p.a, p.b)));
            }
            for id in [&p.a, &p.b] {
                if !ids.contains(id.as_str()) {
                    return Err(Error::UnknownId(id.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let line = PlanLine {
                round: p.round,
                a: p.a.as_str().into(),
                b: p.b.as_str().into(),
                kind: self.kind,
                cell: p.cell.as_deref().map(Into::into),
            };
            out.push_str(&serde_json::to_string(&line).expect("plan line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut pairs = Vec::new();
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: PlanLine = serde_json::from_str(line).map_err(|e| Error::MalformedRow {
                row: k + 1,
                message: e.to_string(),
            })?;
            match kind {
                None => kind = Some(parsed.kind),
                Some(seen) if seen != parsed.kind => {
                    return Err(Error::MalformedRow {
                        row: k + 1,
                        message: "mixed plan kinds".into(),
                    })
                }
                _ => {}
            }
            pairs.push(PlannedPair {
                round: parsed.round,
                a: parsed.a.into_owned(),
                b: parsed.b.into_owned(),
                cell: parsed.cell.map(|c| c.into_owned()),
            });
        }
        let mut plan = Self::empty(kind.unwrap_or(PlanKind::CoarseRounds));
        plan.pairs = pairs;
        Ok(plan)
    }

    pub fn content_hash(&self) -> String {
        hex_digest(self.to_jsonl().as_bytes())
    }
}

/// `rounds` rounds in which every image anchors one pair with a uniformly
/// drawn partner. A plan for `M` rounds is the prefix of any longer plan with
/// the same seed.
pub fn coarse_rounds(manifest: &DatasetManifest, rounds: u32, seed: u64) -> Result<PairingPlan> {
    let n = manifest.len();
    if n < 2 {
        return Err(Error::invalid("coarse pairing needs at least 2 images"));
    }
    if rounds == 0 {
        return Err(Error::invalid("rounds must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n * rounds as usize);
    for round in 1..=rounds {
        for (i, anchor) in manifest.images.iter().enumerate() {
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            pairs.push(PlannedPair {
                round,
                a: anchor.id.clone(),
                b: manifest.images[j].id.clone(),
                cell: None,
            });
        }
    }
    Ok(PairingPlan {
        kind: PlanKind::CoarseRounds,
        pairs,
        seed,
        rounds: Some(rounds),
        bounds: None,
        notes: Vec::new(),
    })
}

struct Distorted<'a> {
    img: &'a ImageRecord,
    reference: &'a str,
    kind: &'a str,
    level: u32,
}

fn distorted_records(manifest: &DatasetManifest) -> Result<Vec<Distorted<'_>>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for img in &manifest.images {
        if let (Some(reference), Some(kind), Some(level)) =
            (img.reference_id.as_deref(), img.distortion_type.as_deref(), img.distortion_level)
        {
            if !seen.insert((reference, kind, level)) {
                return Err(Error::invalid(format!(
                    "duplicate (reference, type, level) = ({reference}, {kind}, {level})"
                )));
            }
            out.push(Distorted {
                img,
                reference,
                kind,
                level,
            });
        }
    }
    Ok(out)
}

fn all_pairs_in_cells(cells: BTreeMap<(String, String), Vec<(String, &str)>>, notes: &mut Vec<String>) -> Vec<PlannedPair> {
    let mut pairs = Vec::new();
    for ((reference, key), mut members) in cells {
        if members.len() < 2 {
            notes.push(format!("skipped cell ({reference}, {key}): fewer than 2 members"));
            continue;
        }
        members.sort();
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                pairs.push(PlannedPair {
                    round: 1,
                    a: members[i].1.to_string(),
                    b: members[j].1.to_string(),
                    cell: Some(key.clone()),
                });
            }
        }
    }
    pairs
}

/// Same reference content and distortion type, every pair of levels. Cells
/// are labelled by distortion type.
pub fn fine_same_content_type(manifest: &DatasetManifest) -> Result<PairingPlan> {
    let records = distorted_records(manifest)?;
    let mut plan = PairingPlan::empty(PlanKind::FineSameContentType);
    if records.is_empty() {
        plan.notes.push("no image carries reference id, distortion type and level".into());
        return Ok(plan);
    }
    let mut cells: BTreeMap<(String, String), Vec<(String, &str)>> = BTreeMap::new();
    for r in &records {
        cells
            .entry((r.reference.to_string(), r.kind.to_string()))
            .or_default()
            .push((format!("{:010}", r.level), r.img.id.as_str()));
    }
    plan.pairs = all_pairs_in_cells(cells, &mut plan.notes);
    Ok(plan)
}

/// Same reference content and distortion level, every pair of types. Cells
/// are labelled `Level-k`.
pub fn fine_same_content_level(manifest: &DatasetManifest) -> Result<PairingPlan> {
    let records = distorted_records(manifest)?;
    let mut plan = PairingPlan::empty(PlanKind::FineSameContentLevel);
    if records.is_empty() {
        plan.notes.push("no image carries reference id, distortion type and level".into());
        return Ok(plan);
    }
    let mut cells: BTreeMap<(String, String), Vec<(String, &str)>> = BTreeMap::new();
    for r in &records {
        cells
            .entry((r.reference.to_string(), format!("Level-{}", r.level)))
            .or_default()
            .push((r.kind.to_string(), r.img.id.as_str()));
    }
    plan.pairs = all_pairs_in_cells(cells, &mut plan.notes);
    Ok(plan)
}

fn interval_label(bounds: &[f64], k: usize) -> String {
    let close = if k + 2 == bounds.len() { ']' } else { ')' };
    format!("[{},{}{close}", bounds[k], bounds[k + 1])
}

/// Index of the interval holding `mos`: half-open except the closed top one.
pub fn interval_of(bounds: &[f64], mos: f64) -> Option<usize> {
    let last = bounds.len().checked_sub(2)?;
    (0..=last).find(|&k| mos >= bounds[k] && (mos < bounds[k + 1] || (k == last && mos <= bounds[k + 1])))
}

/// Images within the same MOS interval, every pair. When `cap` is set and an
/// interval would exceed it, seeded anchor rounds are drawn instead until
/// `cap` pairs are reached.
pub fn fine_mos_interval(manifest: &DatasetManifest, bounds: &[f64], cap: Option<usize>, seed: u64) -> Result<PairingPlan> {
    if bounds.len() < 2 || bounds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("interval bounds must be strictly increasing with at least 2 entries"));
    }
    let mut plan = PairingPlan::empty(PlanKind::FineMosInterval);
    plan.seed = seed;
    plan.bounds = Some(bounds.to_vec());
    let mut members: Vec<Vec<&str>> = vec![Vec::new(); bounds.len() - 1];
    for img in &manifest.images {
        let mos = img.mos.ok_or_else(|| Error::MissingMos(img.id.clone()))?;
        match interval_of(bounds, mos) {
            Some(k) => members[k].push(&img.id),
            None => plan.notes.push(format!("image `{}` (mos {mos}) outside all intervals", img.id)),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, ids) in members.iter().enumerate() {
        let label = interval_label(bounds, k);
        let m = ids.len();
        if m < 2 {
            plan.notes.push(format!("skipped interval {label}: fewer than 2 images"));
            continue;
        }
        let exhaustive = m * (m - 1) / 2;
        match cap {
            Some(cap) if exhaustive > cap => {
                let mut round = 0;
                let mut taken = 0;
                'rounds: loop {
                    round += 1;
                    for i in 0..m {
                        if taken == cap {
                            break 'rounds;
                        }
                        let mut j = rng.gen_range(0..m - 1);
                        if j >= i {
                            j += 1;
                        }
                        plan.pairs.push(PlannedPair {
                            round,
                            a: ids[i].to_string(),
                            b: ids[j].to_string(),
                            cell: Some(label.clone()),
                        });
                        taken += 1;
                    }
                }
            }
            _ => {
                for i in 0..m {
                    for j in i + 1..m {
                        plan.pairs.push(PlannedPair {
                            round: 1,
                            a: ids[i].to_string(),
                            b: ids[j].to_string(),
                            cell: Some(label.clone()),
                        });
                    }
                }
            }
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn plain(n: usize) -> DatasetManifest {
        let images = (0..n)
            .map(|k| ImageRecord::new(format!("img{k:03}"), "d", format!("{k}.ppm")).with_mos(100.0 * k as f64 / n as f64))
            .collect();
        DatasetManifest::new("toy", images).unwrap()
    }

    fn csiq_like(scenes: usize) -> DatasetManifest {
        let types = ["AWGN", "JPEG", "JP2K", "Pink", "Blur"];
        let mut images = Vec::new();
        for s in 0..scenes {
            for t in types {
                for level in 1..=5 {
                    images.push(
                        ImageRecord::new(format!("s{s}_{t}_{level}"), "csiq", "x.ppm")
                            .with_distortion(&format!("scene{s}"), t, level),
                    );
                }
            }
        }
        DatasetManifest::new("csiq", images).unwrap()
    }

    #[test]
    fn coarse_one_round_of_four() {
        let m = plain(4);
        let plan = coarse_rounds(&m, 1, 7).unwrap();
        assert_eq!(plan.len(), 4);
        let anchors: Vec<_> = plan.pairs.iter().map(|p| p.a.clone()).collect();
        assert_eq!(anchors, m.ids());
        assert!(plan.pairs.iter().all(|p| p.a != p.b));
    }

    #[test]
    fn coarse_is_seeded_and_prefix_stable() {
        let m = plain(20);
        assert_eq!(coarse_rounds(&m, 5, 3).unwrap(), coarse_rounds(&m, 5, 3).unwrap());
        assert_ne!(coarse_rounds(&m, 5, 3).unwrap().pairs, coarse_rounds(&m, 5, 4).unwrap().pairs);
        let long = coarse_rounds(&m, 12, 3).unwrap();
        let short = coarse_rounds(&m, 5, 3).unwrap();
        assert_eq!(long.truncated(5).pairs, short.pairs);
    }

    #[test]
    fn coarse_full_scale() {
        let plan = coarse_rounds(&plain(160), DEFAULT_ROUNDS, 1).unwrap();
        assert_eq!(plan.len(), 1920);
        for r in 1..=12 {
            let mut anchors: Vec<_> = plan.pairs.iter().filter(|p| p.round == r).map(|p| &p.a).collect();
            anchors.sort();
            anchors.dedup();
            assert_eq!(anchors.len(), 160);
        }
    }

    #[test]
    fn coarse_rejects_tiny_inputs() {
        assert!(coarse_rounds(&plain(1), 1, 0).is_err());
        assert!(coarse_rounds(&plain(3), 0, 0).is_err());
    }

    #[test]
    fn same_type_counts() {
        assert_eq!(fine_same_content_type(&csiq_like(1)).unwrap().len(), 50);
        let plan = fine_same_content_type(&csiq_like(4)).unwrap();
        assert_eq!(plan.len(), 200);
        let mut per_type: HashMap<String, usize> = HashMap::new();
        for p in &plan.pairs {
            *per_type.entry(p.cell.clone().unwrap()).or_default() += 1;
        }
        assert_eq!(per_type.len(), 5);
        assert!(per_type.values().all(|&c| c == 40));
        // levels differ, type and scene agree
        for p in &plan.pairs {
            let (a, b): (Vec<_>, Vec<_>) = (p.a.split('_').collect(), p.b.split('_').collect());
            assert_eq!((a[0], a[1]), (b[0], b[1]));
            assert_ne!(a[2], b[2]);
        }
    }

    #[test]
    fn same_level_counts() {
        let plan = fine_same_content_level(&csiq_like(4)).unwrap();
        assert_eq!(plan.len(), 200);
        let one_level: Vec<_> = plan
            .pairs
            .iter()
            .filter(|p| p.cell.as_deref() == Some("Level-3") && p.a.starts_with("s0_"))
            .collect();
        assert_eq!(one_level.len(), 10);
    }

    #[test]
    fn fine_without_metadata_is_empty_with_note() {
        let plan = fine_same_content_type(&plain(5)).unwrap();
        assert!(plan.is_empty());
        assert!(!plan.notes.is_empty());
    }

    #[test]
    fn fine_duplicate_cell_rejected() {
        let images = vec![
            ImageRecord::new("x", "d", "x").with_distortion("r", "JPEG", 1),
            ImageRecord::new("y", "d", "y").with_distortion("r", "JPEG", 1),
        ];
        let m = DatasetManifest::new("dup", images).unwrap();
        assert!(fine_same_content_level(&m).is_err());
        assert!(fine_same_content_type(&m).is_err());
    }

    #[test]
    fn mos_interval_edges() {
        assert_eq!(interval_of(&DEFAULT_MOS_BOUNDS, 25.0), Some(1));
        assert_eq!(interval_of(&DEFAULT_MOS_BOUNDS, 100.0), Some(3));
        assert_eq!(interval_of(&DEFAULT_MOS_BOUNDS, 0.0), Some(0));
        assert_eq!(interval_of(&DEFAULT_MOS_BOUNDS, 74.999), Some(2));
        assert_eq!(interval_label(&DEFAULT_MOS_BOUNDS, 3), "[75,100]");
        assert_eq!(interval_label(&DEFAULT_MOS_BOUNDS, 0), "[0,25)");
    }

    #[test]
    fn mos_interval_exhaustive_and_capped() {
        let images = (0..25)
            .map(|k| ImageRecord::new(format!("i{k}"), "spaq", "p").with_mos(50.0 + k as f64))
            .collect();
        let m = DatasetManifest::new("spaq", images).unwrap();
        let plan = fine_mos_interval(&m, &DEFAULT_MOS_BOUNDS, None, 0).unwrap();
        // 50..=74 in [50,75)
        assert_eq!(plan.len(), 300);
        assert!(plan.pairs.iter().all(|p| p.cell.as_deref() == Some("[50,75)")));
        let capped = fine_mos_interval(&m, &DEFAULT_MOS_BOUNDS, Some(60), 9).unwrap();
        assert_eq!(capped.len(), 60);
        assert_eq!(capped.max_round(), 3);
        assert!(capped.pairs.iter().all(|p| p.a != p.b));
        assert_eq!(capped, fine_mos_interval(&m, &DEFAULT_MOS_BOUNDS, Some(60), 9).unwrap());
    }

    #[test]
    fn mos_interval_requires_mos() {
        let m = DatasetManifest::new("x", vec![ImageRecord::new("a", "d", "p"), ImageRecord::new("b", "d", "p")]).unwrap();
        assert!(matches!(fine_mos_interval(&m, &DEFAULT_MOS_BOUNDS, None, 0), Err(Error::MissingMos(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let plan = fine_same_content_type(&csiq_like(1)).unwrap();
        let text = plan.to_jsonl();
        assert!(text.lines().next().unwrap().contains("\"kind\":\"fine_same_content_type\""));
        let back = PairingPlan::from_jsonl(&text).unwrap();
        assert_eq!(back.kind, plan.kind);
        assert_eq!(back.pairs, plan.pairs);
    }

    #[test]
    fn validate_catches_unknown_ids() {
        let m = plain(3);
        let mut plan = coarse_rounds(&m, 1, 0).unwrap();
        plan.validate_against(&m).unwrap();
        plan.pairs[0].b = "ghost".into();
        assert!(matches!(plan.validate_against(&m), Err(Error::UnknownId(_))));
    }
}
