use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FOLD_IDS: [&str; 4] = ["S1", "S2", "S3", "S4"];

/// One seen/unseen partition of the class catalog.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub id: String,
    pub unseen: Vec<String>,
    pub seen: Vec<String>,
}

/// Four folds whose unseen sets partition the classes: sorted names are
/// dealt round-robin, class `i` going to fold `i mod 4`.
pub fn make_folds(classes: &[String]) -> Result<Vec<FoldSpec>> {
    let sorted: BTreeSet<&String> = classes.iter().collect();
    if sorted.len() != classes.len() {
        return Err(Error::contract("make_folds", "duplicate class names"));
    }
    if sorted.len() < FOLD_IDS.len() {
        return Err(Error::contract(
            "make_folds",
            format!("need at least {} classes, got {}", FOLD_IDS.len(), sorted.len()),
        ));
    }
    Ok(FOLD_IDS
        .iter()
        .enumerate()
        .map(|(f, id)| {
            let (unseen, seen): (Vec<(usize, &String)>, Vec<_>) =
                sorted.iter().copied().enumerate().partition(|(i, _)| i % FOLD_IDS.len() == f);
            FoldSpec {
                id: id.to_string(),
                unseen: unseen.into_iter().map(|(_, c)| c.clone()).collect(),
                seen: seen.into_iter().map(|(_, c)| c.clone()).collect(),
            }
        })
        .collect())
}

/// Looks up a fold by id (`S1`…`S4`, case-insensitive).
pub fn fold_by_id(classes: &[String], id: &str) -> Result<FoldSpec> {
    make_folds(classes)?
        .into_iter()
        .find(|f| f.id.eq_ignore_ascii_case(id))
        .ok_or_else(|| Error::contract("fold", format!("unknown fold `{id}`; expected one of {FOLD_IDS:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    const RSKETCH: [&str; 20] = [
        "airplane",
        "baseball diamond",
        "basketball court",
        "beach",
        "bridge",
        "closed road",
        "crosswalk",
        "football field",
        "golf course",
        "intersection",
        "oil gas field",
        "overpass",
        "railway",
        "river",
        "runway",
        "runway marking",
        "storage tank",
        "swimming pool",
        "tennis court",
        "wwtp",
    ];

    #[test]
    fn rsketch_folds() {
        let mut shuffled = names(&RSKETCH);
        shuffled.reverse();
        let folds = make_folds(&shuffled).unwrap();
        let expect = [
            ["airplane", "bridge", "golf course", "railway", "storage tank"],
            ["baseball diamond", "closed road", "intersection", "river", "swimming pool"],
            ["basketball court", "crosswalk", "oil gas field", "runway", "tennis court"],
            ["beach", "football field", "overpass", "runway marking", "wwtp"],
        ];
        for (fold, want) in folds.iter().zip(expect) {
            assert_eq!(fold.unseen, names(&want), "{}", fold.id);
            assert_eq!(fold.seen.len(), 15);
        }
    }

    #[test]
    fn unseen_sets_partition_the_catalog() {
        let classes = names(&["h", "a", "c", "g", "b", "e", "d", "f"]);
        let folds = make_folds(&classes).unwrap();
        let mut all: Vec<String> = folds.iter().flat_map(|f| f.unseen.clone()).collect();
        all.sort();
        assert_eq!(all, names(&["a", "b", "c", "d", "e", "f", "g", "h"]));
        for f in &folds {
            assert_eq!(f.unseen.len(), 2);
            assert!(f.unseen.iter().all(|c| !f.seen.contains(c)));
            assert_eq!(f.unseen.len() + f.seen.len(), 8);
        }
    }

    #[test]
    fn rejects_duplicates_and_tiny_catalogs() {
        assert!(matches!(make_folds(&names(&["a", "b", "a", "c", "d"])), Err(Error::Contract { .. })));
        assert!(matches!(make_folds(&names(&["a", "b", "c"])), Err(Error::Contract { .. })));
        assert!(fold_by_id(&names(&["a", "b", "c", "d"]), "s3").is_ok());
        assert!(fold_by_id(&names(&["a", "b", "c", "d"]), "S5").is_err());
    }
}
