use std::collections::BTreeMap;

use super::{CandidatePool, OpLog};
use crate::taxonomy::Taxonomy;
use crate::text;

fn parent_of(taxonomy: &Taxonomy, code: &str) -> Option<String> {
    taxonomy.get_parent(code, false).ok().flatten().map(|p| p.as_str().to_string())
}

/// Groups of active codes sharing a parent, in code order.
fn sibling_groups(pool: &CandidatePool, taxonomy: &Taxonomy) -> BTreeMap<String, Vec<String>> {
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for code in pool.codes() {
        if let Some(p) = parent_of(taxonomy, code) {
            groups.entry(p).or_default().push(code.to_string());
        }
    }
    groups
}

fn demote(pool: &mut CandidatePool, code: &str, by: f64) {
    let c = pool.active.get_mut(code).expect("active");
    match c.rank_score.as_mut() {
        Some(s) => *s = (*s - by).max(0.0),
        None => c.demotion += by,
    }
}

/// Near-duplicate siblings: same parent, m_desc within `margin` of each
/// other and descriptions overlapping at least `overlap_threshold`. The one
/// with lower judge confidence is dropped; on equal confidence the one with
/// lower m_desc (then the later code) is demoted by `margin`.
pub fn contrastive_screen(
    pool: &mut CandidatePool,
    taxonomy: &Taxonomy,
    margin: f64,
    overlap_threshold: f64,
    log: &mut OpLog,
) {
    for (_, group) in sibling_groups(pool, taxonomy) {
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let (a, b) = (&group[i], &group[j]);
                let (Some(ca), Some(cb)) = (pool.active.get(a), pool.active.get(b)) else { continue };
                let (Some(ma), Some(mb)) = (ca.m_desc, cb.m_desc) else {
                    log.warn(format!("contrastive screen skipped {a}/{b}: m_desc not computed"));
                    continue;
                };
                if (ma - mb).abs() >= margin {
                    continue;
                }
                let (Some(da), Some(db)) = (taxonomy.description_tokens(a), taxonomy.description_tokens(b)) else {
                    continue;
                };
                if text::mutual_overlap(da, db) < overlap_threshold {
                    continue;
                }
                let (ja, jb) = (ca.judge_conf.unwrap_or(0.0), cb.judge_conf.unwrap_or(0.0));
                if ja != jb {
                    let loser = if ja < jb { a } else { b };
                    log.warn(format!("contrastive screen dropped {loser} (near-duplicate of {})", if loser == a { b } else { a }));
                    pool.drop_code(loser);
                } else {
                    let loser = if ma < mb { a } else { b };
                    log.warn(format!("contrastive screen demoted {loser}"));
                    demote(pool, loser, margin);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum HierRule {
    PreferSpecificOverUnspecified,
    DropDuplicateLaterality,
    /// Drop a code when one of its descendants is also present.
    DropMutuallyExclusiveWithLowerConf,
}

impl HierRule {
    pub const ALL: [HierRule; 3] = [
        HierRule::PreferSpecificOverUnspecified,
        HierRule::DropDuplicateLaterality,
        HierRule::DropMutuallyExclusiveWithLowerConf,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "prefer_specific_over_unspecified" => Some(Self::PreferSpecificOverUnspecified),
            "drop_duplicate_laterality" => Some(Self::DropDuplicateLaterality),
            "drop_mutually_exclusive_with_lower_conf" => Some(Self::DropMutuallyExclusiveWithLowerConf),
            _ => None,
        }
    }
}

const LATERALITY: &[&str] = &["right", "left", "bilateral"];

fn is_unspecified(taxonomy: &Taxonomy, code: &str) -> bool {
    taxonomy.description_tokens(code).is_some_and(|t| t.contains("unspecified"))
}

/// Apply the selected hierarchy rules, always in their canonical order.
pub fn hier_prune(pool: &mut CandidatePool, taxonomy: &Taxonomy, rules: &[HierRule], log: &mut OpLog) {
    for rule in HierRule::ALL.into_iter().filter(|r| rules.contains(r)) {
        let mut drop: Vec<(String, &str)> = Vec::new();
        match rule {
            HierRule::PreferSpecificOverUnspecified => {
                for (_, group) in sibling_groups(pool, taxonomy) {
                    if group.iter().any(|c| !is_unspecified(taxonomy, c)) {
                        drop.extend(
                            group.into_iter().filter(|c| is_unspecified(taxonomy, c)).map(|c| (c, "unspecified sibling of a specific code")),
                        );
                    }
                }
            }
            HierRule::DropDuplicateLaterality => {
                let mut variants: BTreeMap<(String, Vec<String>), Vec<String>> = BTreeMap::new();
                for code in pool.codes() {
                    let Ok(desc) = taxonomy.code_to_text(code) else { continue };
                    let toks = text::tokens(desc);
                    if !toks.iter().any(|t| LATERALITY.contains(&t.as_str())) {
                        continue;
                    }
                    let stem: Vec<String> = toks.into_iter().filter(|t| !LATERALITY.contains(&t.as_str())).collect();
                    let parent = parent_of(taxonomy, code).unwrap_or_default();
                    variants.entry((parent, stem)).or_default().push(code.to_string());
                }
                for (_, codes) in variants.into_iter().filter(|(_, v)| v.len() > 1) {
                    let conf = |c: &String| pool.active[c].judge_conf.unwrap_or(0.0);
                    // Highest confidence wins; ties go to the smaller code.
                    let best = codes
                        .iter()
                        .max_by(|x, y| conf(x).total_cmp(&conf(y)).then_with(|| y.cmp(x)))
                        .cloned()
                        .expect("non-empty");
                    drop.extend(codes.into_iter().filter(|c| *c != best).map(|c| (c, "duplicate laterality")));
                }
            }
            HierRule::DropMutuallyExclusiveWithLowerConf => {
                let codes: Vec<&str> = pool.codes().collect();
                for a in &codes {
                    if codes.iter().any(|b| b != a && taxonomy.is_ancestor(a, b).unwrap_or(false)) {
                        drop.push((a.to_string(), "ancestor of a more specific code"));
                    }
                }
            }
        }
        for (code, why) in drop {
            if pool.drop_code(&code) {
                log.warn(format!("hier prune dropped {code}: {why}"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::CandidateCode;
    use super::*;

    fn tax() -> Taxonomy {
        Taxonomy::from_tsv(
            "4\t\tchapter\tEndocrine\n\
             E08-E13\t4\tblock\tDiabetes mellitus\n\
             E11\tE08-E13\tcategory\tType 2 diabetes mellitus\n\
             E11.2\tE11\tsubcategory\tType 2 diabetes mellitus with kidney complications\n\
             E11.22\tE11.2\tsubcategory\tType 2 diabetes mellitus with diabetic chronic kidney disease\n\
             E11.29\tE11.2\tsubcategory\tType 2 diabetes mellitus with other diabetic kidney complication\n\
             13\t\tchapter\tMusculoskeletal\n\
             M15-M19\t13\tblock\tOsteoarthritis\n\
             M17\tM15-M19\tcategory\tOsteoarthritis of knee\n\
             M17.1\tM17\tsubcategory\tUnilateral primary osteoarthritis of knee\n\
             M17.10\tM17.1\tsubcategory\tUnilateral primary osteoarthritis, unspecified knee\n\
             M17.11\tM17.1\tsubcategory\tUnilateral primary osteoarthritis, right knee\n\
             M17.12\tM17.1\tsubcategory\tUnilateral primary osteoarthritis, left knee\n",
        )
        .unwrap()
    }

    fn pool(codes: &[(&str, f64, f64)]) -> CandidatePool {
        let mut p = CandidatePool::default();
        for (c, m, j) in codes {
            let mut cc = CandidateCode::new(*c, "s");
            cc.m_desc = Some(*m);
            cc.judge_conf = Some(*j);
            p.insert(cc);
        }
        p
    }

    #[test]
    fn ancestor_dropped() {
        let t = tax();
        let mut p = pool(&[("E11.2", 0.5, 0.5), ("E11.22", 0.5, 0.5)]);
        hier_prune(&mut p, &t, &[HierRule::DropMutuallyExclusiveWithLowerConf], &mut OpLog::default());
        assert_eq!(p.codes().collect::<Vec<_>>(), vec!["E11.22"]);
        assert!(p.dropped.contains_key("E11.2"));
    }

    #[test]
    fn single_candidate_unchanged() {
        let t = tax();
        let mut p = pool(&[("E11.22", 0.5, 0.5)]);
        hier_prune(&mut p, &t, &HierRule::ALL, &mut OpLog::default());
        assert_eq!(p.active.len(), 1);
    }

    #[test]
    fn unspecified_then_laterality() {
        let t = tax();
        let mut p = pool(&[("M17.10", 0.5, 0.9), ("M17.11", 0.5, 0.6), ("M17.12", 0.5, 0.8)]);
        hier_prune(&mut p, &t, &HierRule::ALL, &mut OpLog::default());
        assert_eq!(p.codes().collect::<Vec<_>>(), vec!["M17.12"]);
    }

    #[test]
    fn contrastive_drops_lower_confidence() {
        let t = tax();
        // Descriptions share 6 of 8 tokens: below 0.8, so nothing happens.
        let mut p = pool(&[("E11.22", 0.80, 0.7), ("E11.29", 0.78, 0.4)]);
        contrastive_screen(&mut p, &t, 0.15, 0.8, &mut OpLog::default());
        assert_eq!(p.active.len(), 2);
        contrastive_screen(&mut p, &t, 0.15, 0.5, &mut OpLog::default());
        assert_eq!(p.codes().collect::<Vec<_>>(), vec!["E11.22"]);
    }

    #[test]
    fn contrastive_zero_margin_is_inert_and_ties_demote() {
        let t = tax();
        let mut p = pool(&[("M17.11", 0.5, 0.6), ("M17.12", 0.5, 0.6)]);
        contrastive_screen(&mut p, &t, 0.0, 0.8, &mut OpLog::default());
        assert!(p.active.values().all(|c| c.demotion == 0.0));
        contrastive_screen(&mut p, &t, 0.15, 0.8, &mut OpLog::default());
        assert_eq!(p.active.len(), 2);
        assert_eq!(p.active["M17.12"].demotion, 0.15);
    }
}
