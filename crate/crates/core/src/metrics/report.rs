use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::distance::{assd, AssdStatus};
use super::mask::{dice, BinaryMask};
use super::wsrt::{wsrt, WsrtResult};
use crate::error::{CtsError, Result};

/// Integer label image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(CtsError::data(format!(
                "label map of {}x{} needs {} entries, got {}",
                width,
                height,
                width * height,
                labels.len()
            )));
        }
        Ok(LabelMap { width, height, labels })
    }

    pub fn mask(&self, class: u8) -> BinaryMask {
        BinaryMask::from_labels(self.width, self.height, &self.labels, class).expect("extent checked on construction")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalEntry {
    pub image_id: String,
    pub class: usize,
    pub dc: f64,
    pub assd: f64,
    pub assd_status: AssdStatus,
    /// Ground truth of this class is non-empty.
    pub gt_present: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    /// Entries (or images, for the overall row) in the DC statistics.
    pub n: usize,
    pub dc_mean: f64,
    pub dc_std: f64,
    /// Entries with an ASSD value (diagonal-marked ones included).
    pub assd_n: usize,
    pub assd_mean: f64,
    pub assd_std: f64,
    /// ASSD values that are the empty-mask diagonal.
    pub assd_marked: usize,
}

/// Per-image, per-class Dice and ASSD with class and overall aggregates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: usize,
    pub mask_empty: bool,
    /// Sorted by image id, then class.
    pub entries: Vec<EvalEntry>,
    pub per_class: Vec<(usize, Aggregate)>,
    pub overall: Aggregate,
}

/// Foreground classes that are scored: `1..classes`, i.e. only class 1 for
/// a binary task.
pub fn evaluated_classes(classes: usize) -> std::ops::Range<usize> {
    1..classes
}

/// Population mean and standard deviation; `NaN` for an empty sample.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalEntry {
    /// Whether the entry enters aggregates under `mask_empty`.
    pub fn counted(&self, mask_empty: bool) -> bool {
        !mask_empty || self.gt_present
    }
}

fn aggregate<'a>(entries: impl Iterator<Item = &'a EvalEntry> + Clone) -> Aggregate {
    let dcs: Vec<f64> = entries.clone().map(|e| e.dc).collect();
    let with_assd: Vec<&EvalEntry> = entries.filter(|e| e.assd_status.has_value()).collect();
    let assds: Vec<f64> = with_assd.iter().map(|e| e.assd).collect();
    let (dc_mean, dc_std) = mean_std(&dcs);
    let (assd_mean, assd_std) = mean_std(&assds);
    Aggregate {
        n: dcs.len(),
        dc_mean,
        dc_std,
        assd_n: assds.len(),
        assd_mean,
        assd_std,
        assd_marked: with_assd.iter().filter(|e| e.assd_status != AssdStatus::Defined).count(),
    }
}

impl EvalReport {
    /// Builds the report from entries, recomputing every aggregate.
    pub fn from_entries(classes: usize, mask_empty: bool, mut entries: Vec<EvalEntry>) -> Self {
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id).then(a.class.cmp(&b.class)));
        let counted = |e: &&EvalEntry| e.counted(mask_empty);
        let per_class = evaluated_classes(classes)
            .map(|c| (c, aggregate(entries.iter().filter(counted).filter(move |e| e.class == c))))
            .collect();

        // Overall: mean over each image's counted entries, then across images.
        let mut dc_img = Vec::new();
        let mut assd_img = Vec::new();
        let mut marked = 0;
        let mut i = 0;
        while i < entries.len() {
            let mut j = i;
            while j < entries.len() && entries[j].image_id == entries[i].image_id {
                j += 1;
            }
            let img: Vec<&EvalEntry> = entries[i..j].iter().filter(counted).collect();
            if !img.is_empty() {
                dc_img.push(img.iter().map(|e| e.dc).sum::<f64>() / img.len() as f64);
            }
            let a: Vec<&&EvalEntry> = img.iter().filter(|e| e.assd_status.has_value()).collect();
            if !a.is_empty() {
                assd_img.push(a.iter().map(|e| e.assd).sum::<f64>() / a.len() as f64);
                marked += a.iter().filter(|e| e.assd_status != AssdStatus::Defined).count();
            }
            i = j;
        }
        let (dc_mean, dc_std) = mean_std(&dc_img);
        let (assd_mean, assd_std) = mean_std(&assd_img);
        let overall = Aggregate {
            n: dc_img.len(),
            dc_mean,
            dc_std,
            assd_n: assd_img.len(),
            assd_mean,
            assd_std,
            assd_marked: marked,
        };
        EvalReport { classes, mask_empty, entries, per_class, overall }
    }

    pub fn class_aggregate(&self, class: usize) -> Option<&Aggregate> {
        self.per_class.iter().find(|(c, _)| *c == class).map(|(_, a)| a)
    }

    /// Counted entries of one image.
    pub fn counted_for(&self, image_id: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.image_id == image_id && e.counted(self.mask_empty))
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,class,dc,assd,assd_defined\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{},{},{}", e.image_id, e.class, e.dc, e.assd, e.assd_status.as_str());
        }
        let _ = writeln!(s, "# policy,classes={},mask_empty={}", self.classes, self.mask_empty);
        let _ = writeln!(s, "# aggregate,scope,n,dc_mean,dc_std,assd_n,assd_mean,assd_std,assd_marked");
        let row = |s: &mut String, scope: &str, a: &Aggregate| {
            let _ = writeln!(
                s,
                "# aggregate,{},{},{},{},{},{},{},{}",
                scope, a.n, a.dc_mean, a.dc_std, a.assd_n, a.assd_mean, a.assd_std, a.assd_marked
            );
        };
        for (c, a) in &self.per_class {
            row(&mut s, &format!("class{}", c), a);
        }
        row(&mut s, "overall", &self.overall);
        s
    }

    /// Parses [`EvalReport::to_csv`] output. Aggregates are recomputed from
    /// the entries and must agree with the footer exactly.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| CtsError::data(format!("eval csv line {}: {}", line, msg));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "image_id,class,dc,assd,assd_defined")) => {}
            _ => return Err(bad(1, "missing header `image_id,class,dc,assd,assd_defined`")),
        }
        let mut entries = Vec::new();
        let mut policy = None;
        let mut footer = Vec::new();
        for (i, line) in lines {
            let ln = i + 1;
            if let Some(rest) = line.strip_prefix("# ") {
                let fields: Vec<&str> = rest.split(',').collect();
                match fields[0] {
                    "policy" => {
                        let get = |key: &str| {
                            fields
                                .iter()
                                .find_map(|f| f.strip_prefix(key))
                                .ok_or_else(|| bad(ln, &format!("policy lacks `{key}`")))
                        };
                        let classes: usize = get("classes=")?.parse().map_err(|_| bad(ln, "bad class count"))?;
                        let mask: bool = get("mask_empty=")?.parse().map_err(|_| bad(ln, "bad mask flag"))?;
                        policy = Some((classes, mask));
                    }
                    "aggregate" if fields.get(1) != Some(&"scope") => footer.push((ln, line.to_string())),
                    _ => {}
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(ln, "expected 5 columns"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(ln, &format!("`{s}` is not a number")));
            let status = AssdStatus::parse(f[4]).ok_or_else(|| bad(ln, "bad assd_defined value"))?;
            entries.push(EvalEntry {
                image_id: f[0].to_string(),
                class: f[1].parse().map_err(|_| bad(ln, "bad class"))?,
                dc: num(f[2])?,
                assd: num(f[3])?,
                assd_status: status,
                gt_present: status.gt_present(),
            });
        }
        let (classes, mask_empty) = policy.ok_or_else(|| CtsError::data("eval csv lacks the `# policy` footer"))?;
        let report = EvalReport::from_entries(classes, mask_empty, entries);
        let rebuilt = report.to_csv();
        for (ln, line) in footer {
            if !rebuilt.lines().any(|l| l == line) {
                return Err(bad(ln, "aggregate row disagrees with the entries"));
            }
        }
        Ok(report)
    }
}

/// Scores predictions against ground truth for every evaluated class.
pub fn evaluate(
    ids: &[String],
    preds: &[LabelMap],
    gts: &[LabelMap],
    classes: usize,
    mask_empty: bool,
) -> Result<EvalReport> {
    if ids.len() != preds.len() || preds.len() != gts.len() {
        return Err(CtsError::data(format!(
            "evaluate needs matched lists, got {} ids, {} predictions, {} ground truths",
            ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    let mut entries = Vec::new();
    for ((id, p), g) in ids.iter().zip(preds).zip(gts) {
        if p.width != g.width || p.height != g.height {
            return Err(CtsError::data(format!(
                "{}: prediction {}x{} vs ground truth {}x{}",
                id, p.width, p.height, g.width, g.height
            )));
        }
        for (what, m) in [("prediction", p), ("ground truth", g)] {
            if let Some(&l) = m.labels.iter().find(|&&l| l as usize >= classes) {
                return Err(CtsError::data(format!(
                    "{}: {} label {} out of range for {} classes",
                    id, what, l, classes
                )));
            }
        }
        for c in evaluated_classes(classes) {
            let (pm, gm) = (p.mask(c as u8), g.mask(c as u8));
            let a = assd(&pm, &gm)?;
            entries.push(EvalEntry {
                image_id: id.clone(),
                class: c,
                dc: dice(&pm, &gm)?,
                assd: a.value,
                assd_status: a.status,
                gt_present: !gm.is_empty(),
            });
        }
    }
    Ok(EvalReport::from_entries(classes, mask_empty, entries))
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    /// `class<k>` or `overall`.
    pub scope: String,
    pub metric: &'static str,
    pub pairs: usize,
    /// `None` when fewer than five non-zero differences exist.
    pub test: Option<WsrtResult>,
    pub note: Option<String>,
}

/// Paired signed-rank tests between two reports over their common counted
/// entries, per class and on the per-image overall means.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Vec<ComparisonRow>> {
    if a.classes != b.classes {
        return Err(CtsError::data(format!(
            "reports cover {} and {} classes",
            a.classes, b.classes
        )));
    }
    type Key = (String, usize);
    let index = |r: &EvalReport| -> BTreeMap<Key, EvalEntry> {
        r.entries
            .iter()
            .filter(|e| e.counted(r.mask_empty))
            .map(|e| ((e.image_id.clone(), e.class), e.clone()))
            .collect()
    };
    let (ia, ib) = (index(a), index(b));
    let pairs: Vec<(&EvalEntry, &EvalEntry)> =
        ia.iter().filter_map(|(k, ea)| ib.get(k).map(|eb| (ea, eb))).collect();

    let mut rows = Vec::new();
    let mut push = |scope: String, metric: &'static str, xs: Vec<f64>, ys: Vec<f64>| -> Result<()> {
        let n = xs.len();
        let (test, note) = match wsrt(&xs, &ys) {
            Ok(t) => (Some(t), None),
            Err(CtsError::InsufficientData(m)) => (None, Some(m)),
            Err(e) => return Err(e),
        };
        rows.push(ComparisonRow { scope, metric, pairs: n, test, note });
        Ok(())
    };
    for c in evaluated_classes(a.classes) {
        let cp: Vec<_> = pairs.iter().filter(|(x, _)| x.class == c).collect();
        push(format!("class{c}"), "dc", cp.iter().map(|p| p.0.dc).collect(), cp.iter().map(|p| p.1.dc).collect())?;
        let ap: Vec<_> = cp
            .iter()
            .filter(|(x, y)| x.assd_status.has_value() && y.assd_status.has_value())
            .collect();
        push(format!("class{c}"), "assd", ap.iter().map(|p| p.0.assd).collect(), ap.iter().map(|p| p.1.assd).collect())?;
    }
    let mut per_image: BTreeMap<&str, (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (x, y) in &pairs {
        let slot = per_image.entry(x.image_id.as_str()).or_default();
        slot.0.push(x.dc);
        slot.1.push(y.dc);
        if x.assd_status.has_value() && y.assd_status.has_value() {
            slot.2.push(x.assd);
            slot.3.push(y.assd);
        }
    }
    let avg = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let (mut dx, mut dy, mut ax, mut ay) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (xd, yd, xa, ya) in per_image.values() {
        dx.push(avg(xd));
        dy.push(avg(yd));
        if !xa.is_empty() {
            ax.push(avg(xa));
            ay.push(avg(ya));
        }
    }
    push("overall".into(), "dc", dx, dy)?;
    push("overall".into(), "assd", ax, ay)?;
    Ok(rows)
}

/// Text table of comparison rows, one per line.
pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("scope,metric,pairs,n_nonzero,w_plus,p_value,method\n");
    for r in rows {
        match &r.test {
            Some(t) => {
                let _ = writeln!(s, "{},{},{},{},{},{},{:?}", r.scope, r.metric, r.pairs, t.n, t.w_plus, t.p_value, t.method);
            }
            None => {
                let _ = writeln!(s, "{},{},{},,,,insufficient", r.scope, r.metric, r.pairs);
            }
        }
    }
    s
}
