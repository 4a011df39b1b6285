//! Distributes estimated encoding energy across encoder sub-processes by
//! combining per-function event counts with fitted per-event energies.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{EnergyModel, ModelError, ModelMode};
use crate::profile::FunctionProfile;

pub const DEFAULT_CATEGORY: &str = "uncategorized";

#[derive(Debug, thiserror::Error)]
pub enum AttributionError {
    #[error("category map parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no functions (or zero total energy) to attribute")]
    EmptyProfile,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Ordered first-match-wins mapping from function/file glob patterns to
/// sub-process categories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryMap {
    pub rules: Vec<(String, String)>,
    pub default_category: String,
}

impl CategoryMap {
    pub fn empty() -> Self {
        Self {
            rules: Vec::new(),
            default_category: DEFAULT_CATEGORY.to_owned(),
        }
    }

    /// First rule whose pattern matches the function name or the source file
    /// wins; falls back to the default category.
    pub fn categorize(&self, function_name: &str, source_file: &str) -> (&str, bool) {
        for (pattern, category) in &self.rules {
            if glob_match(pattern, function_name) || glob_match(pattern, source_file) {
                return (category, true);
            }
        }
        (&self.default_category, false)
    }
}

/// Minimal glob matcher: `*` matches any run of characters, `?` matches one.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0usize, 0usize);
    let (mut star_pi, mut star_ti) = (usize::MAX, 0usize);
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star_pi = pi;
            star_ti = ti;
            pi += 1;
        } else if star_pi != usize::MAX {
            pi = star_pi + 1;
            star_ti += 1;
            ti = star_ti;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}

/// Parses `glob => category` lines; `#` starts a comment.
pub fn load_category_map(source: &str) -> Result<CategoryMap, AttributionError> {
    let mut rules = Vec::new();
    for (idx, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((pattern, category)) = line.split_once("=>") else {
            return Err(AttributionError::Parse {
                line: idx + 1,
                reason: "expected `pattern => category`".into(),
            });
        };
        let pattern = pattern.trim();
        let category = category.trim();
        if pattern.is_empty() || category.is_empty() {
            return Err(AttributionError::Parse {
                line: idx + 1,
                reason: "empty pattern or category".into(),
            });
        }
        rules.push((pattern.to_owned(), category.to_owned()));
    }
    Ok(CategoryMap {
        rules,
        default_category: DEFAULT_CATEGORY.to_owned(),
    })
}

/// Best-effort curated mapping for x265's sub-processes. The encoder's exact
/// function-to-stage assignment is not published anywhere, so this is a
/// starting point meant to be extended per analysis.
pub fn default_x265_map() -> CategoryMap {
    let rules = [
        // entropy coding
        ("*Entropy*", "entropy"),
        ("*entropy*", "entropy"),
        ("*cabac*", "entropy"),
        ("*encodeBin*", "entropy"),
        ("*codeCoeff*", "entropy"),
        ("*Bitstream*", "entropy"),
        // quantization and transforms
        ("*quant*", "quant-and-transform"),
        ("*Quant*", "quant-and-transform"),
        ("*dct*", "quant-and-transform"),
        ("*idct*", "quant-and-transform"),
        ("*transform*", "quant-and-transform"),
        ("*dst4*", "quant-and-transform"),
        // in-loop filters
        ("*sao*", "in-loop"),
        ("*Sao*", "in-loop"),
        ("*deblock*", "in-loop"),
        ("*Deblock*", "in-loop"),
        ("*loopFilter*", "in-loop"),
        // intra mode decision (before prediction so `*intra*`-style rules
        // further down don't swallow the search functions)
        ("*checkIntra*", "intra-mode-search"),
        ("*estIntraAngular*", "intra-mode-search"),
        ("*IntraMode*", "intra-mode-search"),
        ("*intraMode*", "intra-mode-search"),
        // intra prediction
        ("*intra_pred*", "intra-prediction"),
        ("*intraPred*", "intra-prediction"),
        ("*predIntra*", "intra-prediction"),
        ("*intra_filter*", "intra-prediction"),
        // per-frame setup
        ("*FrameEncoder::start*", "frame-level-init"),
        ("*initFrame*", "frame-level-init"),
        ("*Frame::create*", "frame-level-init"),
        // one-time setup
        ("*Encoder::create*", "global-init"),
        ("*primitives*", "global-init"),
        ("*::init*", "global-init"),
        // CTU/CU bookkeeping
        ("*CUData*", "ctu-cu-preproc"),
        ("*CUGeom*", "ctu-cu-preproc"),
        ("*compressCTU*", "ctu-cu-preproc"),
        ("*loadCTUData*", "ctu-cu-preproc"),
    ];
    CategoryMap {
        rules: rules
            .iter()
            .map(|&(p, c)| (p.to_owned(), c.to_owned()))
            .collect(),
        default_category: DEFAULT_CATEGORY.to_owned(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEnergy {
    pub energy_j: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionReport {
    pub per_category: BTreeMap<String, CategoryEnergy>,
    pub total_j: f64,
    /// Fraction of the total estimated energy matched by non-default rules.
    pub coverage: f64,
}

/// Per-function energy is the dot product of its event counts with the model
/// coefficients; category energy sums matched functions. The total equals the
/// whole-profile posterior estimate, so attribution conserves energy.
pub fn attribute(
    functions: &[FunctionProfile],
    model: &EnergyModel,
    map: &CategoryMap,
) -> Result<AttributionReport, AttributionError> {
    if model.mode != ModelMode::Posterior {
        return Err(AttributionError::Model(ModelError::WrongMode {
            expected: ModelMode::Posterior,
            actual: model.mode,
        }));
    }
    if functions.is_empty() {
        return Err(AttributionError::EmptyProfile);
    }
    let mut per_category: BTreeMap<String, f64> = BTreeMap::new();
    let mut total_j = 0.0;
    let mut matched_j = 0.0;
    for func in functions {
        let energy = model.estimate_posterior(&func.counts)?;
        let (category, matched) = map.categorize(&func.function_name, &func.source_file);
        *per_category.entry(category.to_owned()).or_insert(0.0) += energy;
        total_j += energy;
        if matched {
            matched_j += energy;
        }
    }
    if total_j <= 0.0 {
        return Err(AttributionError::EmptyProfile);
    }
    let coverage = matched_j / total_j;
    if coverage < 0.9 {
        log::warn!(
            "category map coverage {:.1}% below 90%; consider extending the mapping",
            coverage * 100.0
        );
    }
    Ok(AttributionReport {
        per_category: per_category
            .into_iter()
            .map(|(category, energy_j)| {
                (
                    category,
                    CategoryEnergy {
                        energy_j,
                        fraction: energy_j / total_j,
                    },
                )
            })
            .collect(),
        total_j,
        coverage,
    })
}

impl AttributionReport {
    fn sorted(&self) -> Vec<(&String, &CategoryEnergy)> {
        let mut rows: Vec<_> = self.per_category.iter().collect();
        rows.sort_by(|a, b| b.1.energy_j.total_cmp(&a.1.energy_j));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,energy_j,percent\n");
        for (category, e) in self.sorted() {
            let _ = writeln!(out, "{},{},{:.1}", category, e.energy_j, e.fraction * 100.0);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>14} {:>8}", "category", "energy_j", "pct");
        for (category, e) in self.sorted() {
            let _ = writeln!(
                out,
                "{:<24} {:>14.6} {:>7.1}%",
                category,
                e.energy_j,
                e.fraction * 100.0
            );
        }
        let _ = writeln!(out, "{:<24} {:>14.6} {:>7.1}%", "total", self.total_j, 100.0);
        let _ = writeln!(out, "coverage: {:.1}%", self.coverage * 100.0);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{EventId, EventVector};
    use crate::model::FitMeta;
    use approx::assert_relative_eq;

    fn model() -> EnergyModel {
        EnergyModel {
            preset: crate::model::Preset::Medium,
            mode: ModelMode::Posterior,
            coefficients: [(EventId::Ir, 1e-9), (EventId::Dr, 4e-9)]
                .into_iter()
                .collect(),
            time_coefficient: 0.0,
            fit_meta: FitMeta {
                training_record_count: 0,
                objective_value: 0.0,
                solver_iterations: 0,
                schema_version: 1,
            },
        }
    }

    fn func(name: &str, ir: u64, dr: u64) -> FunctionProfile {
        FunctionProfile {
            function_name: name.to_owned(),
            source_file: "enc.cpp".to_owned(),
            counts: EventVector::from_counts([(EventId::Ir, ir), (EventId::Dr, dr)]),
        }
    }

    #[test]
    fn glob_semantics() {
        assert!(glob_match("x265::intra*", "x265::intra_pred_angular"));
        assert!(glob_match("*quant*", "dequant_scaling"));
        assert!(glob_match("a?c", "abc"));
        assert!(!glob_match("a?c", "ac"));
        assert!(glob_match("*", "anything"));
        assert!(!glob_match("x265::intra*", "x265::sao_filter"));
        assert!(glob_match("*.cpp", "entropy.cpp"));
    }

    #[test]
    fn single_function_gets_fraction_one() {
        let map = load_category_map("main* => entry\n").unwrap();
        let report = attribute(&[func("main", 100, 50)], &model(), &map).unwrap();
        assert_eq!(report.per_category.len(), 1);
        assert_relative_eq!(report.per_category["entry"].fraction, 1.0);
        assert_relative_eq!(report.coverage, 1.0);
    }

    #[test]
    fn equal_vectors_split_half_half() {
        let map = load_category_map("alpha => a\nbeta => b\n").unwrap();
        let report = attribute(
            &[func("alpha", 100, 50), func("beta", 100, 50)],
            &model(),
            &map,
        )
        .unwrap();
        assert_relative_eq!(report.per_category["a"].fraction, 0.5, epsilon = 1e-12);
        assert_relative_eq!(report.per_category["b"].fraction, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn three_functions_match_hand_summed_oracle() {
        let map = load_category_map("*quant* => qt\n*intra* => intra\n").unwrap();
        let functions = [
            func("quant_c", 1000, 200),
            func("intra_pred", 500, 100),
            func("misc", 300, 50),
        ];
        let report = attribute(&functions, &model(), &map).unwrap();
        // Oracle: per-function dot products summed by hand.
        let e_quant = 1000.0 * 1e-9 + 200.0 * 4e-9;
        let e_intra = 500.0 * 1e-9 + 100.0 * 4e-9;
        let e_misc = 300.0 * 1e-9 + 50.0 * 4e-9;
        assert_relative_eq!(report.per_category["qt"].energy_j, e_quant, max_relative = 1e-12);
        assert_relative_eq!(report.per_category["intra"].energy_j, e_intra, max_relative = 1e-12);
        assert_relative_eq!(
            report.per_category[DEFAULT_CATEGORY].energy_j,
            e_misc,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            report.total_j,
            e_quant + e_intra + e_misc,
            max_relative = 1e-12
        );
        let frac_sum: f64 = report.per_category.values().map(|e| e.fraction).sum();
        assert_relative_eq!(frac_sum, 1.0, epsilon = 1e-9);
        assert_relative_eq!(
            report.coverage,
            (e_quant + e_intra) / report.total_j,
            max_relative = 1e-12
        );
    }

    #[test]
    fn first_rule_wins_against_sequential_oracle() {
        let map = load_category_map("*intra* => first\n*intra_pred* => second\n").unwrap();
        // Oracle: walk the rules in order, return on first match.
        let oracle = |name: &str| -> &str {
            for (p, c) in &map.rules {
                if glob_match(p, name) {
                    return c;
                }
            }
            DEFAULT_CATEGORY
        };
        let (category, _) = map.categorize("intra_pred_dc", "f.cpp");
        assert_eq!(category, oracle("intra_pred_dc"));
        assert_eq!(category, "first");
    }

    #[test]
    fn empty_config_only_default() {
        let map = load_category_map("# just comments\n\n").unwrap();
        assert!(map.rules.is_empty());
        let (category, matched) = map.categorize("anything", "a.c");
        assert_eq!(category, DEFAULT_CATEGORY);
        assert!(!matched);
    }

    #[test]
    fn malformed_rule_reports_line() {
        let err = load_category_map("ok => fine\nbroken line\n").unwrap_err();
        match err {
            AttributionError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_profile_rejected() {
        assert!(matches!(
            attribute(&[], &model(), &CategoryMap::empty()).unwrap_err(),
            AttributionError::EmptyProfile
        ));
    }

    #[test]
    fn conservation_against_whole_profile_estimate() {
        let functions = [
            func("quant_c", 12345, 678),
            func("intra_pred", 9999, 1111),
            func("sao_filter", 424_242, 99),
        ];
        let m = model();
        let report = attribute(&functions, &m, &default_x265_map()).unwrap();
        let mut totals = EventVector::new();
        for f in &functions {
            totals.add_vector(&f.counts);
        }
        let whole = m.estimate_posterior(&totals).unwrap();
        assert_relative_eq!(report.total_j, whole, max_relative = 1e-9);
    }

    #[test]
    fn refining_a_rule_leaves_other_categories_unchanged() {
        let coarse = load_category_map("*intra* => intra\n*quant* => qt\n").unwrap();
        // Split `*intra*` into two patterns partitioning its matches.
        let fine =
            load_category_map("*intra_pred* => pred\n*intra_search* => search\n*quant* => qt\n")
                .unwrap();
        let functions = [
            func("intra_pred_dc", 100, 10),
            func("intra_search_best", 200, 20),
            func("quant_c", 300, 30),
        ];
        let m = model();
        let a = attribute(&functions, &m, &coarse).unwrap();
        let b = attribute(&functions, &m, &fine).unwrap();
        assert_relative_eq!(
            a.per_category["qt"].energy_j,
            b.per_category["qt"].energy_j,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            a.per_category["intra"].energy_j,
            b.per_category["pred"].energy_j + b.per_category["search"].energy_j,
            max_relative = 1e-12
        );
    }

    #[test]
    fn report_order_invariant() {
        let mut functions = vec![
            func("quant_c", 100, 10),
            func("intra_pred", 200, 20),
            func("misc", 300, 30),
        ];
        let m = model();
        let map = default_x265_map();
        let a = attribute(&functions, &m, &map).unwrap();
        functions.reverse();
        let b = attribute(&functions, &m, &map).unwrap();
        assert_eq!(
            a.per_category.keys().collect::<Vec<_>>(),
            b.per_category.keys().collect::<Vec<_>>()
        );
        for (cat, ea) in &a.per_category {
            let eb = &b.per_category[cat];
            assert_relative_eq!(ea.energy_j, eb.energy_j, max_relative = 1e-12);
            assert_relative_eq!(ea.fraction, eb.fraction, max_relative = 1e-12);
        }
    }
}
