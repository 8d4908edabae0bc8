//! Raw interaction logs to padded, split, per-user sequences.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense id reserved for padding. Real items start at 1.
pub const PAD: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl RawInteraction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }
}

/// Parses `user<TAB>item<TAB>timestamp` lines.
pub fn parse_interactions<R: Read>(reader: R) -> Result<Vec<RawInteraction>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse { line: line_no, message };
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(parse_err("empty field".into()));
        }
        let timestamp: i64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad timestamp `{}`: {e}", fields[2])))?;
        if timestamp < 0 {
            return Err(parse_err(format!("negative timestamp {timestamp}")));
        }
        out.push(RawInteraction::new(fields[0], fields[1], timestamp));
    }
    Ok(out)
}

pub fn load_interactions(path: &Path) -> Result<Vec<RawInteraction>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(file)
}

pub fn write_interactions(path: &Path, rows: &[RawInteraction]) -> Result<()> {
    let mut buf = String::new();
    for r in rows {
        buf.push_str(&format!("{}\t{}\t{}\n", r.user, r.item, r.timestamp));
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Removes users and items below their thresholds until nothing changes.
/// Surviving rows keep their input order.
pub fn k_core_filter(interactions: &[RawInteraction], k_user: usize, k_item: usize) -> Vec<RawInteraction> {
    let mut alive = vec![true; interactions.len()];
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (r, _) in interactions.iter().zip(&alive).filter(|(_, a)| **a) {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let mut changed = false;
        for (r, a) in interactions.iter().zip(alive.iter_mut()) {
            if *a && (users[r.user.as_str()] < k_user || items[r.item.as_str()] < k_item) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    interactions
        .iter()
        .zip(&alive)
        .filter(|(_, a)| **a)
        .map(|(r, _)| r.clone())
        .collect()
}

/// Bidirectional raw ↔ dense id map. Dense ids start at `offset`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    offset: usize,
    raw: Vec<String>,
    dense: HashMap<String, usize>,
}

impl IdMap {
    pub fn new(offset: usize) -> Self {
        Self {
            offset,
            ..Self::default()
        }
    }

    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&id) = self.dense.get(raw) {
            return id;
        }
        let id = self.offset + self.raw.len();
        self.raw.push(raw.to_string());
        self.dense.insert(raw.to_string(), id);
        id
    }

    pub fn to_dense(&self, raw: &str) -> Option<usize> {
        self.dense.get(raw).copied()
    }

    pub fn to_raw(&self, dense: usize) -> Option<&str> {
        dense
            .checked_sub(self.offset)
            .and_then(|i| self.raw.get(i))
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    /// Two-column TSV: `dense<TAB>raw`.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut buf = String::new();
        for (i, raw) in self.raw.iter().enumerate() {
            buf.push_str(&format!("{}\t{}\n", self.offset + i, raw));
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path, offset: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = Self::new(offset);
        for (i, line) in text.lines().enumerate() {
            let (dense, raw) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("{}: expected two columns", path.display()),
            })?;
            let got = map.intern(raw);
            if dense.parse::<usize>().ok() != Some(got) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("{}: ids must be contiguous from {offset}", path.display()),
                });
            }
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

#[derive(Debug, Clone)]
pub struct Sequences {
    pub sequences: Vec<UserSequence>,
    pub users: IdMap,
    pub items: IdMap,
}

impl Sequences {
    pub fn num_items(&self) -> usize {
        self.items.len()
    }
}

/// Groups interactions per user in chronological order (stable on ties).
/// Users get dense ids from 0 and items from 1, by first appearance.
pub fn build_sequences(interactions: &[RawInteraction]) -> Result<Sequences> {
    if interactions.is_empty() {
        return Err(Error::InvalidInput("no interactions".into()));
    }
    let mut users = IdMap::new(0);
    let mut items = IdMap::new(1);
    let mut grouped: Vec<Vec<(i64, usize)>> = Vec::new();
    for r in interactions {
        let u = users.intern(&r.user);
        let i = items.intern(&r.item);
        if u == grouped.len() {
            grouped.push(Vec::new());
        }
        grouped[u].push((r.timestamp, i));
    }
    let sequences = grouped
        .into_iter()
        .enumerate()
        .map(|(user, mut rows)| {
            rows.sort_by_key(|(t, _)| *t);
            UserSequence {
                user,
                items: rows.iter().map(|(_, i)| *i).collect(),
                timestamps: rows.iter().map(|(t, _)| *t).collect(),
            }
        })
        .collect();
    Ok(Sequences {
        sequences,
        users,
        items,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitOrder {
    /// Last interaction → validation, second-to-last → test.
    #[default]
    ValidLast,
    /// Last interaction → test, second-to-last → validation.
    Conventional,
}

impl std::str::FromStr for SplitOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid_last" => Ok(Self::ValidLast),
            "conventional" => Ok(Self::Conventional),
            other => Err(Error::Config(format!("split_order `{other}` (expected valid_last|conventional)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Holdout {
    pub item: usize,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user: usize,
    pub train: Vec<usize>,
    pub train_times: Vec<i64>,
    pub test: Holdout,
    pub valid: Holdout,
}

impl UserSplit {
    pub fn holdout(&self, target: Target) -> Holdout {
        match target {
            Target::Valid => self.valid,
            Target::Test => self.test,
        }
    }

    /// Interactions that precede `target` chronologically.
    pub fn context(&self, target: Target, order: SplitOrder) -> (Vec<usize>, Vec<i64>) {
        let first_held = match order {
            SplitOrder::ValidLast => Target::Test,
            SplitOrder::Conventional => Target::Valid,
        };
        let mut items = self.train.clone();
        let mut times = self.train_times.clone();
        if target != first_held {
            let h = self.holdout(first_held);
            items.push(h.item);
            times.push(h.timestamp);
        }
        (items, times)
    }

    /// Every item the user interacted with (train, validation and test).
    pub fn history(&self) -> HashSet<usize> {
        let mut h: HashSet<usize> = self.train.iter().copied().collect();
        h.insert(self.test.item);
        h.insert(self.valid.item);
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    pub num_items: usize,
    pub order: SplitOrder,
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Interaction count per dense item id over the training split (index 0 unused).
    pub fn train_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items + 1];
        for u in &self.users {
            for &i in &u.train {
                counts[i] += 1;
            }
        }
        counts
    }

    pub fn user(&self, dense: usize) -> Option<&UserSplit> {
        self.users
            .binary_search_by_key(&dense, |u| u.user)
            .ok()
            .map(|i| &self.users[i])
    }
}

/// Leave-one-out holdout of the two most recent interactions per user.
/// Users with fewer than three interactions are dropped with a warning.
pub fn split_leave_one_out(sequences: &[UserSequence], num_items: usize, order: SplitOrder) -> SplitDataset {
    let mut users = Vec::with_capacity(sequences.len());
    for s in sequences {
        let n = s.items.len();
        if n < 3 {
            log::warn!("user {} has {n} interactions; excluded from the split", s.user);
            continue;
        }
        let last = Holdout {
            item: s.items[n - 1],
            timestamp: s.timestamps[n - 1],
        };
        let penultimate = Holdout {
            item: s.items[n - 2],
            timestamp: s.timestamps[n - 2],
        };
        let (test, valid) = match order {
            SplitOrder::ValidLast => (penultimate, last),
            SplitOrder::Conventional => (last, penultimate),
        };
        users.push(UserSplit {
            user: s.user,
            train: s.items[..n - 2].to_vec(),
            train_times: s.timestamps[..n - 2].to_vec(),
            test,
            valid,
        });
    }
    users.sort_by_key(|u| u.user);
    SplitDataset {
        users,
        num_items,
        order,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded {
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
    pub mask: Vec<bool>,
}

impl Padded {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Index of the first non-padding slot.
    pub fn first_valid(&self) -> Option<usize> {
        self.mask.iter().position(|m| *m)
    }
}

/// Left-pads with [`PAD`] or keeps the most recent `n` interactions.
pub fn pad_truncate(items: &[usize], timestamps: &[i64], n: usize) -> Padded {
    debug_assert_eq!(items.len(), timestamps.len());
    let keep = items.len().min(n);
    let start = items.len() - keep;
    let pad = n - keep;
    let mut out = Padded {
        items: vec![PAD; pad],
        timestamps: vec![0; pad],
        mask: vec![false; pad],
    };
    out.items.extend_from_slice(&items[start..]);
    out.timestamps.extend_from_slice(&timestamps[start..]);
    out.mask.extend(std::iter::repeat(true).take(keep));
    out
}

/// Draws `n` distinct items from `1..=num_items` uniformly, excluding `history`.
pub fn sample_negatives<R: Rng + ?Sized>(
    user: usize,
    history: &HashSet<usize>,
    num_items: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let excluded = history.iter().filter(|&&i| (1..=num_items).contains(&i)).count();
    let available = num_items - excluded;
    if available < n {
        return Err(Error::UniverseTooSmall {
            user,
            requested: n,
            available,
        });
    }
    if available >= 2 * n {
        let mut picked = Vec::with_capacity(n);
        let mut seen = HashSet::with_capacity(n);
        while picked.len() < n {
            let c = rng.gen_range(1..=num_items);
            if !history.contains(&c) && seen.insert(c) {
                picked.push(c);
            }
        }
        return Ok(picked);
    }
    let mut pool: Vec<usize> = (1..=num_items).filter(|i| !history.contains(i)).collect();
    for k in 0..n {
        let j = rng.gen_range(k..pool.len());
        pool.swap(k, j);
    }
    pool.truncate(n);
    Ok(pool)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitRecord {
    train: Vec<usize>,
    test: usize,
    valid: usize,
    train_times: Vec<i64>,
    test_time: i64,
    valid_time: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub split_order: SplitOrder,
}

pub const SPLITS_FILE: &str = "splits.json";
pub const META_FILE: &str = "dataset.json";
pub const USERS_FILE: &str = "users.tsv";
pub const ITEMS_FILE: &str = "items.tsv";

impl SplitDataset {
    /// `{user → {train, test, valid, train_times, test_time, valid_time}}`.
    pub fn to_manifest_json(&self) -> serde_json::Value {
        let map: BTreeMap<usize, SplitRecord> = self
            .users
            .iter()
            .map(|u| {
                (
                    u.user,
                    SplitRecord {
                        train: u.train.clone(),
                        test: u.test.item,
                        valid: u.valid.item,
                        train_times: u.train_times.clone(),
                        test_time: u.test.timestamp,
                        valid_time: u.valid.timestamp,
                    },
                )
            })
            .collect();
        serde_json::to_value(map).expect("split records serialize")
    }

    pub fn from_manifest_json(value: serde_json::Value, num_items: usize, order: SplitOrder) -> Result<Self> {
        let map: BTreeMap<usize, SplitRecord> = serde_json::from_value(value)?;
        let mut users = Vec::with_capacity(map.len());
        for (user, r) in map {
            if r.train.len() != r.train_times.len() {
                return Err(Error::InvalidInput(format!("user {user}: train items and times differ in length")));
            }
            let all = r.train.iter().chain([&r.test, &r.valid]);
            if let Some(bad) = all.into_iter().find(|&&i| i == PAD || i > num_items) {
                return Err(Error::InvalidInput(format!("user {user}: item {bad} outside 1..={num_items}")));
            }
            users.push(UserSplit {
                user,
                train: r.train,
                train_times: r.train_times,
                test: Holdout {
                    item: r.test,
                    timestamp: r.test_time,
                },
                valid: Holdout {
                    item: r.valid,
                    timestamp: r.valid_time,
                },
            });
        }
        Ok(Self {
            users,
            num_items,
            order,
        })
    }

    pub fn save(&self, dir: &Path, users: &IdMap, items: &IdMap) -> Result<()> {
        let splits = dir.join(SPLITS_FILE);
        let mut f = fs::File::create(&splits).map_err(|e| Error::io(&splits, e))?;
        serde_json::to_writer(&mut f, &self.to_manifest_json())?;
        f.write_all(b"\n").map_err(|e| Error::io(&splits, e))?;
        let meta = DatasetMeta {
            num_users: self.users.len(),
            num_items: self.num_items,
            num_interactions: self.users.iter().map(|u| u.train.len() + 2).sum(),
            split_order: self.order,
        };
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
        users.write_tsv(&dir.join(USERS_FILE))?;
        items.write_tsv(&dir.join(ITEMS_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let splits = dir.join(SPLITS_FILE);
        for p in [&meta_path, &splits] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        let meta: DatasetMeta =
            serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
        let value: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&splits).map_err(|e| Error::io(&splits, e))?)?;
        Self::from_manifest_json(value, meta.num_items, meta.split_order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(items: &[usize]) -> UserSequence {
        UserSequence {
            user: 0,
            items: items.to_vec(),
            timestamps: (0..items.len() as i64).map(|t| t * 10).collect(),
        }
    }

    #[test]
    fn parses_rows_in_order() {
        let rows = parse_interactions("u1\ti1\t100\nu1\ti2\t200\n".as_bytes()).unwrap();
        assert_eq!(rows, vec![RawInteraction::new("u1", "i1", 100), RawInteraction::new("u1", "i2", 200)]);
        assert!(parse_interactions("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn wrong_delimiter_reports_line() {
        match parse_interactions("u1,i1,100\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match parse_interactions("u1\ti1\t1\nu2\ti2\t-5\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_interactions(Path::new("/nonexistent/ufrec.tsv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn k_core_cases() {
        let rows = vec![
            RawInteraction::new("u1", "i1", 1),
            RawInteraction::new("u1", "i2", 2),
            RawInteraction::new("u2", "i2", 3),
        ];
        // already at the fixpoint
        assert_eq!(k_core_filter(&rows, 1, 1), rows);
        // u2 has one interaction: removed, u1 keeps both
        assert_eq!(k_core_filter(&rows, 2, 1), rows[..2].to_vec());
        let singles = vec![
            RawInteraction::new("a", "x", 1),
            RawInteraction::new("b", "y", 1),
            RawInteraction::new("c", "z", 1),
        ];
        assert!(k_core_filter(&singles, 2, 1).is_empty());
    }

    #[test]
    fn sequences_sorted_stably_with_round_trip_ids() {
        let rows = vec![
            RawInteraction::new("u", "a", 300),
            RawInteraction::new("u", "b", 100),
            RawInteraction::new("u", "c", 200),
            RawInteraction::new("v", "x", 5),
            RawInteraction::new("v", "y", 5),
        ];
        let s = build_sequences(&rows).unwrap();
        assert_eq!(s.sequences[0].items, vec![2, 3, 1]);
        assert_eq!(s.sequences[0].timestamps, vec![100, 200, 300]);
        assert_eq!(s.sequences[1].items, vec![4, 5]);
        for id in 1..=s.items.len() {
            assert_eq!(s.items.to_dense(s.items.to_raw(id).unwrap()), Some(id));
        }
        for id in 0..s.users.len() {
            assert_eq!(s.users.to_dense(s.users.to_raw(id).unwrap()), Some(id));
        }
        assert!(build_sequences(&[]).is_err());
    }

    #[test]
    fn split_holds_out_validation_last() {
        let d = split_leave_one_out(&[seq(&[1, 2, 3, 4])], 4, SplitOrder::ValidLast);
        let u = &d.users[0];
        assert_eq!(u.train, vec![1, 2]);
        assert_eq!(u.test.item, 3);
        assert_eq!(u.valid.item, 4);
        assert_eq!(u.context(Target::Test, SplitOrder::ValidLast).0, vec![1, 2]);
        assert_eq!(u.context(Target::Valid, SplitOrder::ValidLast).0, vec![1, 2, 3]);

        let d = split_leave_one_out(&[seq(&[1, 2, 3])], 3, SplitOrder::ValidLast);
        assert_eq!(d.users[0].train, vec![1]);
        assert_eq!((d.users[0].test.item, d.users[0].valid.item), (2, 3));

        assert!(split_leave_one_out(&[seq(&[1, 2])], 2, SplitOrder::ValidLast).users.is_empty());

        let d = split_leave_one_out(&[seq(&[1, 2, 3, 4])], 4, SplitOrder::Conventional);
        assert_eq!((d.users[0].test.item, d.users[0].valid.item), (4, 3));
        assert_eq!(d.users[0].context(Target::Test, SplitOrder::Conventional).0, vec![1, 2, 3]);
    }

    #[test]
    fn padding_and_truncation() {
        let p = pad_truncate(&[7, 8], &[1, 2], 4);
        assert_eq!(p.items, vec![0, 0, 7, 8]);
        assert_eq!(p.mask, vec![false, false, true, true]);
        let p = pad_truncate(&[1, 2, 3, 4], &[1, 2, 3, 4], 4);
        assert_eq!(p.items, vec![1, 2, 3, 4]);
        assert!(p.mask.iter().all(|m| *m));
        let p = pad_truncate(&[1, 2, 3, 4, 5, 6], &[1, 2, 3, 4, 5, 6], 4);
        assert_eq!(p.items, vec![3, 4, 5, 6]);
        assert_eq!(p.timestamps, vec![3, 4, 5, 6]);
    }

    #[test]
    fn negatives_respect_history_and_seed() {
        let history: HashSet<usize> = (1..=50).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let neg = sample_negatives(0, &history, 3416, 100, &mut rng).unwrap();
        assert_eq!(neg.len(), 100);
        assert_eq!(neg.iter().collect::<HashSet<_>>().len(), 100);
        assert!(neg.iter().all(|i| !history.contains(i) && (1..=3416).contains(i)));
        let again = sample_negatives(0, &history, 3416, 100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(neg, again);

        let history: HashSet<usize> = (1..=9).collect();
        let forced = sample_negatives(0, &history, 10, 1, &mut rng).unwrap();
        assert_eq!(forced, vec![10]);
        assert!(matches!(
            sample_negatives(0, &history, 10, 2, &mut rng),
            Err(Error::UniverseTooSmall { available: 1, .. })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let seqs = vec![
            UserSequence {
                user: 0,
                items: vec![1, 2, 3, 1],
                timestamps: vec![1, 5, 9, 20],
            },
            UserSequence {
                user: 1,
                items: vec![3, 2, 1],
                timestamps: vec![2, 3, 4],
            },
        ];
        let d = split_leave_one_out(&seqs, 3, SplitOrder::ValidLast);
        let back = SplitDataset::from_manifest_json(d.to_manifest_json(), 3, SplitOrder::ValidLast).unwrap();
        assert_eq!(back, d);
        assert!(SplitDataset::from_manifest_json(d.to_manifest_json(), 2, SplitOrder::ValidLast).is_err());
    }
}
