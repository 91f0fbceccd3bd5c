//! Balanced panel data, group derivation and admissible group-time cells.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// First-treatment period of a unit. `Period(k)` uses the 1-based period
/// index, not the label found in the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Group {
    Period(usize),
    Never,
}

impl Group {
    pub fn period(self) -> Option<usize> {
        match self {
            Group::Period(p) => Some(p),
            Group::Never => None,
        }
    }

    /// `D_t` implied by the group.
    pub fn treated_at(self, t: usize) -> bool {
        matches!(self, Group::Period(g) if t >= g)
    }
}

/// Group value as read from input, in the data's own time labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroupLabel {
    At(i64),
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ControlMode {
    NeverTreated,
    NotYetTreated,
}

impl fmt::Display for ControlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlMode::NeverTreated => write!(f, "never"),
            ControlMode::NotYetTreated => write!(f, "notyet"),
        }
    }
}

/// An admissible `(g, t)` combination. Periods are 1-based indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct GroupTimeCell {
    pub g: usize,
    pub t: usize,
    pub delta: usize,
    pub mode: ControlMode,
}

impl GroupTimeCell {
    /// Base period `g - delta - 1`.
    pub fn base_period(&self) -> usize {
        self.g - self.delta - 1
    }

    /// Whether unit group `group` is in the comparison pool of this cell.
    pub fn is_control(&self, group: Group) -> bool {
        match self.mode {
            ControlMode::NeverTreated => group == Group::Never,
            ControlMode::NotYetTreated => {
                !group.treated_at(self.t + self.delta) && group != Group::Period(self.g)
            }
        }
    }

    pub fn is_treated(&self, group: Group) -> bool {
        group == Group::Period(self.g)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PanelError {
    #[error("unbalanced panel: unit {unit} has no observation in period {period}")]
    UnbalancedPanel { unit: String, period: i64 },
    #[error("non-binary treatment value {value} for unit {unit} in period {period}")]
    NonBinaryTreatment { unit: String, period: i64, value: f64 },
    #[error("duplicate observation for unit {unit} in period {period}")]
    DuplicateObservation { unit: String, period: i64 },
    #[error("covariate {column} varies over time for unit {unit}")]
    TimeVaryingCovariate { unit: String, column: String },
    #[error("group value {label} of unit {unit} is not an observed period")]
    InvalidGroup { unit: String, label: i64 },
    #[error("unit {unit} is treated in the first period; pass the drop option to remove such units")]
    AlwaysTreated { unit: String },
    #[error("treatment paths violate staggered adoption: {0}")]
    Staggered(StaggeredReport),
    #[error("records carry neither a treatment nor a group value")]
    MissingTreatment,
    #[error("no comparison units are available")]
    NoControlUnits,
    #[error("no admissible group-time cells")]
    NoAdmissibleCells,
    #[error("invalid panel: {0}")]
    Invalid(String),
}

/// Offending `(unit, period label)` pairs of a staggered-adoption check.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StaggeredReport {
    pub violations: Vec<(String, i64)>,
}

impl StaggeredReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for StaggeredReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shown: Vec<String> = self
            .violations
            .iter()
            .take(5)
            .map(|(u, p)| format!("unit {u} at period {p}"))
            .collect();
        write!(f, "{}", shown.join(", "))?;
        if self.violations.len() > 5 {
            write!(f, " and {} more", self.violations.len() - 5)?;
        }
        Ok(())
    }
}

/// Checks `D_1 = 0` and monotone treatment paths. `paths[i][k]` is the
/// treatment of unit `i` in the `k`-th period.
pub fn validate_staggered(unit_ids: &[String], paths: &[Vec<u8>], period_labels: &[i64]) -> StaggeredReport {
    let mut report = StaggeredReport::default();
    for (id, path) in unit_ids.iter().zip(paths) {
        if path.first() == Some(&1) {
            report.violations.push((id.clone(), period_labels[0]));
        }
        for k in 1..path.len() {
            if path[k - 1] == 1 && path[k] == 0 {
                report.violations.push((id.clone(), period_labels[k]));
            }
        }
    }
    report
}

/// A validated balanced panel. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    unit_ids: Vec<String>,
    period_labels: Vec<i64>,
    outcome: Vec<f64>,
    group: Vec<Group>,
    z: Vec<f64>,
    x_sub: Vec<f64>,
    x_names: Vec<String>,
}

impl PanelData {
    /// Assembles a panel from unit-major arrays. `outcome` is `n x T`,
    /// `x_sub` is `n x x_names.len()`.
    pub fn new(
        unit_ids: Vec<String>,
        period_labels: Vec<i64>,
        outcome: Vec<f64>,
        group: Vec<Group>,
        z: Vec<f64>,
        x_sub: Vec<f64>,
        x_names: Vec<String>,
    ) -> Result<Self, PanelError> {
        let n = unit_ids.len();
        let t = period_labels.len();
        if t < 2 {
            return Err(PanelError::Invalid("at least two periods are required".into()));
        }
        if period_labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PanelError::Invalid("period labels must be strictly increasing".into()));
        }
        if outcome.len() != n * t || group.len() != n || z.len() != n || x_sub.len() != n * x_names.len() {
            return Err(PanelError::Invalid("array dimensions do not match".into()));
        }
        for (id, g) in unit_ids.iter().zip(&group) {
            match *g {
                Group::Period(1) => return Err(PanelError::AlwaysTreated { unit: id.clone() }),
                Group::Period(p) if p == 0 || p > t => {
                    return Err(PanelError::Invalid(format!("group index {p} out of range")))
                }
                _ => {}
            }
        }
        Ok(Self { unit_ids, period_labels, outcome, group, z, x_sub, x_names })
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.period_labels.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn period_labels(&self) -> &[i64] {
        &self.period_labels
    }

    /// Label of the 1-based period index `t`.
    pub fn period_label(&self, t: usize) -> i64 {
        self.period_labels[t - 1]
    }

    /// Outcome of unit `i` in 1-based period `t`.
    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.outcome[i * self.n_periods() + t - 1]
    }

    pub fn treatment(&self, i: usize, t: usize) -> u8 {
        self.group[i].treated_at(t) as u8
    }

    pub fn group(&self, i: usize) -> Group {
        self.group[i]
    }

    pub fn groups(&self) -> &[Group] {
        &self.group
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn n_x_sub(&self) -> usize {
        self.x_names.len()
    }

    pub fn x_sub(&self, i: usize) -> &[f64] {
        let k = self.n_x_sub();
        &self.x_sub[i * k..(i + 1) * k]
    }

    /// Largest observed group, `Never` whenever never-treated units exist.
    pub fn max_group(&self) -> Option<Group> {
        self.group.iter().copied().max()
    }

    pub fn has_never_treated(&self) -> bool {
        self.group.iter().any(|g| *g == Group::Never)
    }
}

/// One row of long-format input.
#[derive(Debug, Clone, PartialEq)]
pub struct LongRecord {
    pub id: String,
    pub time: i64,
    pub outcome: f64,
    pub treatment: Option<f64>,
    pub group: Option<GroupLabel>,
    pub z: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub drop_always_treated: bool,
}

/// What happened while loading.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub dropped_always_treated: Vec<String>,
    pub group_treatment_disagreements: usize,
}

/// Builds a validated panel from long-format records. Units are ordered by
/// identifier so the result does not depend on record order.
pub fn load_panel(
    records: &[LongRecord],
    x_names: Vec<String>,
    options: LoadOptions,
) -> Result<(PanelData, LoadReport), PanelError> {
    if records.is_empty() {
        return Err(PanelError::Invalid("no records".into()));
    }
    let k = x_names.len();
    if records.iter().any(|r| r.x.len() != k) {
        return Err(PanelError::Invalid("covariate count differs between records".into()));
    }
    let periods: Vec<i64> = records.iter().map(|r| r.time).collect::<BTreeSet<_>>().into_iter().collect();
    let n_t = periods.len();
    let period_index: HashMap<i64, usize> = periods.iter().enumerate().map(|(k, p)| (*p, k)).collect();

    let mut by_unit: BTreeMap<&str, Vec<Option<&LongRecord>>> = BTreeMap::new();
    for rec in records {
        let slots = by_unit.entry(rec.id.as_str()).or_insert_with(|| vec![None; n_t]);
        let slot = &mut slots[period_index[&rec.time]];
        if slot.is_some() {
            return Err(PanelError::DuplicateObservation { unit: rec.id.clone(), period: rec.time });
        }
        *slot = Some(rec);
    }

    let mut report = LoadReport::default();
    let mut unit_ids = Vec::new();
    let mut outcome = Vec::new();
    let mut group = Vec::new();
    let mut z = Vec::new();
    let mut x_sub = Vec::new();
    for (id, slots) in &by_unit {
        let mut rows = Vec::with_capacity(n_t);
        for (k, slot) in slots.iter().enumerate() {
            match slot {
                Some(r) => rows.push(*r),
                None => {
                    return Err(PanelError::UnbalancedPanel { unit: id.to_string(), period: periods[k] })
                }
            }
        }
        let first = rows[0];
        for r in &rows[1..] {
            if r.z != first.z && !(r.z.is_nan() && first.z.is_nan()) {
                return Err(PanelError::TimeVaryingCovariate { unit: id.to_string(), column: "z".into() });
            }
            for (j, (a, b)) in r.x.iter().zip(&first.x).enumerate() {
                if a != b {
                    return Err(PanelError::TimeVaryingCovariate {
                        unit: id.to_string(),
                        column: x_names[j].clone(),
                    });
                }
            }
        }

        let mut path = Vec::new();
        let has_d = rows.iter().all(|r| r.treatment.is_some());
        if has_d {
            for r in &rows {
                let d = r.treatment.unwrap();
                if d != 0.0 && d != 1.0 {
                    return Err(PanelError::NonBinaryTreatment { unit: id.to_string(), period: r.time, value: d });
                }
                path.push(d as u8);
            }
        }

        let g = match first.group {
            Some(label) => {
                if rows.iter().any(|r| r.group != Some(label)) {
                    return Err(PanelError::TimeVaryingCovariate { unit: id.to_string(), column: "group".into() });
                }
                let g = match label {
                    GroupLabel::Never => Group::Never,
                    GroupLabel::At(l) => match period_index.get(&l) {
                        Some(&k) => Group::Period(k + 1),
                        None => return Err(PanelError::InvalidGroup { unit: id.to_string(), label: l }),
                    },
                };
                if has_d {
                    let implied: Vec<u8> = (1..=n_t).map(|t| g.treated_at(t) as u8).collect();
                    if implied != path {
                        report.group_treatment_disagreements += 1;
                        log::warn!("unit {id}: group column disagrees with treatment path; using the group column");
                    }
                }
                g
            }
            None => {
                if !has_d {
                    return Err(PanelError::MissingTreatment);
                }
                let single = validate_staggered(&[id.to_string()], std::slice::from_ref(&path), &periods);
                // units treated from the first period are handled below
                let reversal = single.violations.iter().any(|(_, p)| *p != periods[0]);
                if reversal {
                    return Err(PanelError::Staggered(single));
                }
                match path.iter().position(|&d| d == 1) {
                    Some(k) => Group::Period(k + 1),
                    None => Group::Never,
                }
            }
        };

        if g == Group::Period(1) {
            if options.drop_always_treated {
                report.dropped_always_treated.push(id.to_string());
                continue;
            }
            return Err(PanelError::AlwaysTreated { unit: id.to_string() });
        }

        unit_ids.push(id.to_string());
        outcome.extend(rows.iter().map(|r| r.outcome));
        group.push(g);
        z.push(first.z);
        x_sub.extend_from_slice(&first.x);
    }

    let panel = PanelData::new(unit_ids, periods, outcome, group, z, x_sub, x_names)?;
    Ok((panel, report))
}

/// All admissible cells ordered by `(g, t)`.
///
/// The largest group is excluded from the treated groups only when it is a
/// finite period, i.e. when there are no never-treated units.
pub fn enumerate_cells(panel: &PanelData, delta: usize, mode: ControlMode) -> Result<Vec<GroupTimeCell>, PanelError> {
    let n_t = panel.n_periods();
    let g_bar = panel.max_group().ok_or(PanelError::NoAdmissibleCells)?;
    if mode == ControlMode::NeverTreated && !panel.has_never_treated() {
        return Err(PanelError::NoControlUnits);
    }
    let groups: BTreeSet<usize> = panel
        .groups()
        .iter()
        .filter_map(|g| g.period())
        .filter(|&g| Group::Period(g) != g_bar)
        .filter(|&g| g >= 2 + delta)
        .collect();

    let mut cells = Vec::new();
    for &g in &groups {
        for t in 2..=n_t.saturating_sub(delta) {
            if t + delta < g {
                continue;
            }
            if mode == ControlMode::NotYetTreated {
                if let Group::Period(gb) = g_bar {
                    if t + delta >= gb {
                        continue;
                    }
                }
            }
            let cell = GroupTimeCell { g, t, delta, mode };
            if panel.groups().iter().any(|&u| cell.is_control(u)) {
                cells.push(cell);
            }
        }
    }
    if cells.is_empty() {
        return Err(PanelError::NoAdmissibleCells);
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, time: i64, d: f64) -> LongRecord {
        LongRecord { id: id.into(), time, outcome: time as f64, treatment: Some(d), group: None, z: 0.5, x: vec![] }
    }

    fn panel_from_groups(groups: &[Group], n_t: usize) -> PanelData {
        let n = groups.len();
        PanelData::new(
            (0..n).map(|i| format!("u{i}")).collect(),
            (1..=n_t as i64).collect(),
            vec![0.0; n * n_t],
            groups.to_vec(),
            vec![0.0; n],
            vec![],
            vec![],
        )
        .unwrap()
    }

    /// Brute-force scan of the admissibility inequalities.
    fn brute_force_cells(groups: &[Group], n_t: usize, delta: usize, mode: ControlMode) -> Vec<(usize, usize)> {
        let g_bar = groups.iter().copied().max().unwrap();
        let mut out = Vec::new();
        for g in 1..=n_t {
            if !groups.contains(&Group::Period(g)) || Group::Period(g) == g_bar || g < 2 + delta {
                continue;
            }
            for t in 1..=n_t {
                let mut ok = t >= 2 && t + delta <= n_t && t + delta >= g;
                if mode == ControlMode::NotYetTreated {
                    if let Group::Period(gb) = g_bar {
                        ok &= t + delta < gb;
                    }
                }
                if ok {
                    out.push((g, t));
                }
            }
        }
        out
    }

    #[test]
    fn all_untreated_units_are_never_treated() {
        let mut rows = Vec::new();
        for u in ["a", "b", "c"] {
            for t in 1..=3 {
                rows.push(rec(u, t, 0.0));
            }
        }
        let (panel, _) = load_panel(&rows, vec![], LoadOptions::default()).unwrap();
        assert!(panel.groups().iter().all(|g| *g == Group::Never));
    }

    #[test]
    fn group_is_first_treated_period() {
        let rows = vec![rec("a", 1, 0.0), rec("a", 2, 1.0), rec("a", 3, 1.0)];
        let (panel, _) = load_panel(&rows, vec![], LoadOptions::default()).unwrap();
        assert_eq!(panel.group(0), Group::Period(2));
    }

    #[test]
    fn missing_period_is_unbalanced() {
        let rows = vec![rec("a", 1, 0.0), rec("a", 2, 0.0), rec("b", 1, 0.0), rec("b", 2, 0.0), rec("b", 3, 0.0)];
        let err = load_panel(&rows, vec![], LoadOptions::default()).unwrap_err();
        assert_eq!(err, PanelError::UnbalancedPanel { unit: "a".into(), period: 3 });
    }

    #[test]
    fn duplicates_and_non_binary_treatment_are_rejected() {
        let rows = vec![rec("a", 1, 0.0), rec("a", 1, 0.0)];
        assert!(matches!(
            load_panel(&rows, vec![], LoadOptions::default()),
            Err(PanelError::DuplicateObservation { .. })
        ));
        let rows = vec![rec("a", 1, 0.0), rec("a", 2, 0.5)];
        assert!(matches!(
            load_panel(&rows, vec![], LoadOptions::default()),
            Err(PanelError::NonBinaryTreatment { .. })
        ));
    }

    #[test]
    fn always_treated_units_error_or_drop() {
        let rows = vec![rec("a", 1, 1.0), rec("a", 2, 1.0), rec("b", 1, 0.0), rec("b", 2, 0.0)];
        assert!(matches!(
            load_panel(&rows, vec![], LoadOptions::default()),
            Err(PanelError::AlwaysTreated { .. })
        ));
        let (panel, report) = load_panel(&rows, vec![], LoadOptions { drop_always_treated: true }).unwrap();
        assert_eq!(panel.n_units(), 1);
        assert_eq!(report.dropped_always_treated, vec!["a".to_string()]);
    }

    #[test]
    fn staggered_validation_examples() {
        let ids = vec!["u".to_string()];
        let labels = [1, 2, 3];
        assert!(validate_staggered(&ids, &[vec![0, 1, 1]], &labels).is_ok());
        let r = validate_staggered(&ids, &[vec![0, 1, 0]], &labels);
        assert_eq!(r.violations, vec![("u".to_string(), 3)]);
        let r = validate_staggered(&ids, &[vec![1, 1, 1]], &labels);
        assert_eq!(r.violations, vec![("u".to_string(), 1)]);
    }

    #[test]
    fn reversal_fails_loading() {
        let rows = vec![rec("a", 1, 0.0), rec("a", 2, 1.0), rec("a", 3, 0.0)];
        assert!(matches!(load_panel(&rows, vec![], LoadOptions::default()), Err(PanelError::Staggered(_))));
    }

    #[test]
    fn group_column_wins_and_sentinels_parse() {
        let mut rows = vec![rec("a", 1, 0.0), rec("a", 2, 0.0), rec("a", 3, 1.0)];
        for r in rows.iter_mut() {
            r.group = Some(GroupLabel::At(2));
        }
        let (panel, report) = load_panel(&rows, vec![], LoadOptions::default()).unwrap();
        assert_eq!(panel.group(0), Group::Period(2));
        assert_eq!(report.group_treatment_disagreements, 1);
    }

    #[test]
    fn cells_with_single_treated_group() {
        let panel = panel_from_groups(&[Group::Period(2), Group::Never], 4);
        let cells = enumerate_cells(&panel, 0, ControlMode::NeverTreated).unwrap();
        let got: Vec<_> = cells.iter().map(|c| (c.g, c.t)).collect();
        assert_eq!(got, vec![(2, 2), (2, 3), (2, 4)]);
    }

    #[test]
    fn cells_match_brute_force_scan() {
        let groups = [Group::Period(2), Group::Period(3), Group::Period(4), Group::Never];
        let panel = panel_from_groups(&groups, 4);
        for mode in [ControlMode::NeverTreated, ControlMode::NotYetTreated] {
            for delta in 0..2 {
                let got: Vec<_> = enumerate_cells(&panel, delta, mode)
                    .map(|cs| cs.iter().map(|c| (c.g, c.t)).collect())
                    .unwrap_or_default();
                assert_eq!(got, brute_force_cells(&groups, 4, delta, mode), "mode {mode:?} delta {delta}");
            }
        }
        // never-treated units present: the last cohort stays a treated group
        let got: Vec<_> = enumerate_cells(&panel, 0, ControlMode::NeverTreated)
            .unwrap()
            .iter()
            .map(|c| (c.g, c.t))
            .collect();
        assert_eq!(got, vec![(2, 2), (2, 3), (2, 4), (3, 3), (3, 4), (4, 4)]);
    }

    #[test]
    fn not_yet_treated_without_never_units_drops_last_cohort() {
        let groups = [Group::Period(2), Group::Period(3), Group::Period(4)];
        let panel = panel_from_groups(&groups, 4);
        assert_eq!(enumerate_cells(&panel, 0, ControlMode::NeverTreated), Err(PanelError::NoControlUnits));
        let got: Vec<_> = enumerate_cells(&panel, 0, ControlMode::NotYetTreated)
            .unwrap()
            .iter()
            .map(|c| (c.g, c.t))
            .collect();
        assert_eq!(got, vec![(2, 2), (2, 3), (3, 3)]);
        assert_eq!(got, brute_force_cells(&groups, 4, 0, ControlMode::NotYetTreated));
    }

    #[test]
    fn cell_output_invariant_to_record_order() {
        let mut rows = Vec::new();
        for (u, g) in [("a", 2), ("b", 3), ("c", 0)] {
            for t in 1..=4 {
                let d = if g > 0 && t >= g { 1.0 } else { 0.0 };
                rows.push(rec(u, t, d));
            }
        }
        let (p1, _) = load_panel(&rows, vec![], LoadOptions::default()).unwrap();
        rows.reverse();
        let (p2, _) = load_panel(&rows, vec![], LoadOptions::default()).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(
            enumerate_cells(&p1, 0, ControlMode::NeverTreated),
            enumerate_cells(&p2, 0, ControlMode::NeverTreated)
        );
        for c in enumerate_cells(&p1, 0, ControlMode::NeverTreated).unwrap() {
            assert!(c.base_period() >= 1);
            assert!(p1.groups().iter().any(|g| *g == Group::Period(c.g)));
        }
    }
}
