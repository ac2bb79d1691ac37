use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::stable_hash;

/// Canonical herb dictionary with dense, lexicographically ordered ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HerbVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
    /// Variant appellation -> canonical name.
    aliases: BTreeMap<String, String>,
}

fn clean(name: &str) -> &str {
    name.trim()
}

/// Follows alias links to the canonical name; errors on cycles.
fn resolve<'a>(aliases: &'a BTreeMap<String, String>, name: &'a str) -> Result<&'a str> {
    let mut cur = name;
    let mut seen = BTreeSet::new();
    while let Some(next) = aliases.get(cur) {
        if !seen.insert(cur) {
            return Err(Error::Alias(format!("alias cycle through `{cur}`")));
        }
        cur = next;
    }
    Ok(cur)
}

/// Builds the vocabulary from raw prescriptions and an alias list of
/// `(variant, canonical)` pairs. Every alias must end at a name that occurs
/// (after resolution) in the prescriptions.
pub fn build_vocabulary(prescriptions: &[Vec<String>], aliases: &[(String, String)]) -> Result<HerbVocabulary> {
    if prescriptions.is_empty() {
        return Err(Error::InvalidArgument("no prescriptions to build a vocabulary from".into()));
    }
    let mut alias_map = BTreeMap::new();
    for (variant, canonical) in aliases {
        let (variant, canonical) = (clean(variant), clean(canonical));
        if variant.is_empty() || canonical.is_empty() {
            return Err(Error::Alias("empty alias entry".into()));
        }
        if variant == canonical {
            return Err(Error::Alias(format!("alias cycle: `{variant}` maps to itself")));
        }
        if let Some(prev) = alias_map.insert(variant.to_string(), canonical.to_string()) {
            if prev != canonical {
                return Err(Error::Alias(format!("`{variant}` aliased to both `{prev}` and `{canonical}`")));
            }
        }
    }
    let mut canon = BTreeSet::new();
    for p in prescriptions {
        for raw in p {
            let name = clean(raw);
            if name.is_empty() {
                continue;
            }
            canon.insert(resolve(&alias_map, name)?.to_string());
        }
    }
    for variant in alias_map.keys() {
        let target = resolve(&alias_map, variant)?;
        if !canon.contains(target) {
            return Err(Error::Alias(format!("`{variant}` targets unknown canonical name `{target}`")));
        }
    }
    Ok(HerbVocabulary::from_parts(canon.into_iter().collect(), alias_map))
}

impl HerbVocabulary {
    fn from_parts(names: Vec<String>, aliases: BTreeMap<String, String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        HerbVocabulary { names, index, aliases }
    }

    /// Vocabulary over already canonical names, no aliases.
    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = names.into_iter().map(|n| clean(&n).to_string()).collect();
        Self::from_parts(set.into_iter().collect(), BTreeMap::new())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn aliases(&self) -> &BTreeMap<String, String> {
        &self.aliases
    }

    /// Canonical form of `name`, if it is known directly or through an alias.
    pub fn canonical<'a>(&'a self, name: &'a str) -> Option<&'a str> {
        let resolved = resolve(&self.aliases, clean(name)).ok()?;
        self.index.contains_key(resolved).then_some(resolved)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.canonical(name).map(|c| self.index[c])
    }

    /// Maps a raw name list to a sorted, deduplicated id set. Unknown names
    /// are reported together.
    pub fn normalize(&self, names: &[String]) -> Result<Vec<usize>> {
        let mut ids = BTreeSet::new();
        let mut unknown = Vec::new();
        for n in names {
            if clean(n).is_empty() {
                continue;
            }
            match self.id(n) {
                Some(id) => {
                    ids.insert(id);
                }
                None => unknown.push(clean(n).to_string()),
            }
        }
        if !unknown.is_empty() {
            unknown.sort();
            unknown.dedup();
            return Err(Error::UnknownHerbs(unknown));
        }
        Ok(ids.into_iter().collect())
    }

    /// Canonical names of a list, order preserved, duplicates removed.
    pub fn canonicalize(&self, names: &[String]) -> Vec<String> {
        let mut seen = BTreeSet::new();
        names
            .iter()
            .filter_map(|n| self.canonical(n))
            .filter(|c| seen.insert(c.to_string()))
            .map(str::to_string)
            .collect()
    }

    /// Fingerprint over the ordered canonical names.
    pub fn hash(&self) -> u64 {
        stable_hash(self.names.join("\n").as_bytes())
    }

    /// Text form: `herb\t<name>` and `alias\t<variant>\t<canonical>` lines.
    pub fn write(&self, mut out: impl Write) -> Result<()> {
        for n in &self.names {
            writeln!(out, "herb\t{n}")?;
        }
        for (v, c) in &self.aliases {
            writeln!(out, "alias\t{v}\t{c}")?;
        }
        Ok(())
    }

    pub fn read(input: impl BufRead) -> Result<Self> {
        let mut names = Vec::new();
        let mut aliases = BTreeMap::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["herb", name] => names.push(name.to_string()),
                ["alias", v, c] => {
                    aliases.insert(v.to_string(), c.to_string());
                }
                _ => return Err(Error::BadFormat(format!("vocabulary line {}: `{line}`", lineno + 1))),
            }
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != names {
            return Err(Error::BadFormat("vocabulary names must be unique and sorted".into()));
        }
        let vocab = Self::from_parts(names, aliases);
        for v in vocab.aliases.keys() {
            let target = resolve(&vocab.aliases, v)?;
            if !vocab.index.contains_key(target) {
                return Err(Error::Alias(format!("`{v}` targets unknown canonical name `{target}`")));
            }
        }
        Ok(vocab)
    }
}

/// Reads alias pairs from `variant\tcanonical` lines (`#` starts a comment).
pub fn read_aliases(input: impl BufRead) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((v, c)) => out.push((v.trim().to_string(), c.trim().to_string())),
            None => {
                return Err(Error::BadFormat(format!("alias line {}: expected `variant<TAB>canonical`", lineno + 1)))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rx(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn alias_folds_to_one_id() {
        let data = vec![rx(&["Gan Cao", "Fu Ling"]), rx(&["Licorice", "Bai Zhu"])];
        let v = build_vocabulary(&data, &[("Licorice".into(), "Gan Cao".into())]).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("Licorice"), v.id("Gan Cao"));
        assert_eq!(v.names(), &["Bai Zhu", "Fu Ling", "Gan Cao"]);
        assert_eq!(v.normalize(&rx(&["Licorice", "Gan Cao"])).unwrap(), vec![2]);
    }

    #[test]
    fn deterministic() {
        let data = vec![rx(&["c", "a"]), rx(&["b"])];
        assert_eq!(build_vocabulary(&data, &[]).unwrap(), build_vocabulary(&data, &[]).unwrap());
    }

    #[test]
    fn alias_errors() {
        let data = vec![rx(&["a", "b"])];
        let cyc = [("x".to_string(), "y".to_string()), ("y".to_string(), "x".to_string())];
        assert!(matches!(build_vocabulary(&data, &cyc), Err(Error::Alias(_))));
        let unknown = [("x".to_string(), "zzz".to_string())];
        assert!(matches!(build_vocabulary(&data, &unknown), Err(Error::Alias(_))));
        assert!(build_vocabulary(&[], &[]).is_err());
    }

    #[test]
    fn unknown_names_listed() {
        let v = build_vocabulary(&[rx(&["a", "b"])], &[]).unwrap();
        match v.normalize(&rx(&["a", "q", "p", "q"])) {
            Err(Error::UnknownHerbs(names)) => assert_eq!(names, vec!["p", "q"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn canonicalize_is_idempotent() {
        let v = build_vocabulary(&[rx(&["a", "b", "c"])], &[("aa".into(), "a".into())]).unwrap();
        let once = v.canonicalize(&rx(&["aa", "b", "a"]));
        assert_eq!(once, rx(&["a", "b"]));
        assert_eq!(v.canonicalize(&once), once);
    }

    #[test]
    fn text_round_trip() {
        let v = build_vocabulary(&[rx(&["a", "b", "c"])], &[("aa".into(), "a".into())]).unwrap();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let back = HerbVocabulary::read(buf.as_slice()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }
}
