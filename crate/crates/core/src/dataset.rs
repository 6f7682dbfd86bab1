//! Interaction ingestion, user k-core filtering, chronological leave-one-out
//! splits and the binary dataset format.
//!
//! Ids are assigned by sorted key order after filtering, so the same set of
//! raw interactions always maps to the same dense ids regardless of file
//! order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"CDECF-DS";
pub const DATASET_VERSION: u16 = 1;

/// One deduplicated (user, item, timestamp) record.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub delimiter: u8,
    pub has_header: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            delimiter: b',',
            has_header: false,
        }
    }
}

/// Record counts observed while ingesting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub total: usize,
    pub malformed: usize,
    pub duplicates: usize,
}

/// Reads interactions from a delimited text file.
pub fn ingest_path(path: &Path, opts: &IngestOptions) -> Result<(Vec<RawInteraction>, IngestReport)> {
    let file = File::open(path).map_err(|source| Error::Ingest {
        path: path.to_path_buf(),
        source,
    })?;
    ingest_reader(BufReader::new(file), opts).map_err(|e| match e {
        Error::Io(source) => Error::Ingest {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Reads interactions from any byte stream.
///
/// Each line carries `user_key, item_key, ..., timestamp`: the first two
/// fields are the keys and the last field is the integer timestamp, which
/// accepts both the plain three-column layout and the four-column
/// `user,item,rating,timestamp` layout of public review dumps.
pub fn ingest_reader<R: Read>(reader: R, opts: &IngestOptions) -> Result<(Vec<RawInteraction>, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(opts.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut report = IngestReport::default();
    let mut earliest: HashMap<(String, String), i64> = HashMap::new();

    for record in rdr.records() {
        report.total += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => match e.into_kind() {
                csv::ErrorKind::Io(io) => return Err(Error::Io(io)),
                _ => {
                    report.malformed += 1;
                    continue;
                }
            },
        };
        let Some(parsed) = parse_record(&record) else {
            report.malformed += 1;
            continue;
        };
        let (user, item, ts) = parsed;
        match earliest.entry((user, item)) {
            std::collections::hash_map::Entry::Occupied(mut slot) => {
                report.duplicates += 1;
                if ts < *slot.get() {
                    slot.insert(ts);
                }
            }
            std::collections::hash_map::Entry::Vacant(slot) => {
                slot.insert(ts);
            }
        }
    }

    if report.malformed > 0 {
        warn!("skipped {} malformed interaction records", report.malformed);
    }

    let mut out: Vec<RawInteraction> = earliest
        .into_iter()
        .map(|((user_key, item_key), timestamp)| RawInteraction {
            user_key,
            item_key,
            timestamp,
        })
        .collect();
    out.sort();
    Ok((out, report))
}

fn parse_record(record: &csv::StringRecord) -> Option<(String, String, i64)> {
    if record.len() < 3 {
        return None;
    }
    let user = record.get(0)?;
    let item = record.get(1)?;
    if user.is_empty() || item.is_empty() {
        return None;
    }
    let ts = record.get(record.len() - 1)?.parse::<i64>().ok()?;
    Some((user.to_string(), item.to_string(), ts))
}

/// Drops every interaction of users with fewer than `k` distinct items.
///
/// A single pass over users; items are not filtered.
pub fn kcore_filter_users(interactions: Vec<RawInteraction>, k: usize) -> Result<Vec<RawInteraction>> {
    if k == 0 {
        return Err(Error::InvalidKCore(k));
    }
    let mut items_per_user: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for it in &interactions {
        items_per_user
            .entry(it.user_key.as_str())
            .or_default()
            .insert(it.item_key.as_str());
    }
    let keep: BTreeSet<String> = items_per_user
        .into_iter()
        .filter(|(_, items)| items.len() >= k)
        .map(|(u, _)| u.to_string())
        .collect();
    let out: Vec<RawInteraction> = interactions
        .into_iter()
        .filter(|it| keep.contains(&it.user_key))
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyAfterKCore { k });
    }
    Ok(out)
}

/// Which held-out split to look at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

/// Leave-one-out interaction dataset with dense ids.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    /// Grouped by user in ascending user order, chronological within a user.
    train: Vec<(u32, u32)>,
    validation: Vec<u32>,
    test: Vec<u32>,
    user_histories: Vec<Vec<u32>>,
    user_keys: Vec<String>,
    item_keys: Vec<String>,
    train_sorted: Vec<Vec<u32>>,
}

/// Sorts each user's history by (timestamp, item id) and splits it.
pub fn build_splits(interactions: &[RawInteraction]) -> Result<InteractionDataset> {
    let user_keys: Vec<String> = interactions
        .iter()
        .map(|it| it.user_key.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let item_keys: Vec<String> = interactions
        .iter()
        .map(|it| it.item_key.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let user_index: HashMap<&str, u32> = user_keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i as u32))
        .collect();
    let item_index: HashMap<&str, u32> = item_keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i as u32))
        .collect();

    let mut per_user: BTreeMap<u32, BTreeMap<u32, i64>> = BTreeMap::new();
    for it in interactions {
        let u = user_index[it.user_key.as_str()];
        let i = item_index[it.item_key.as_str()];
        let slot = per_user.entry(u).or_default().entry(i).or_insert(it.timestamp);
        *slot = (*slot).min(it.timestamp);
    }

    let mut histories = Vec::with_capacity(user_keys.len());
    for (u, items) in per_user {
        let mut events: Vec<(i64, u32)> = items.into_iter().map(|(i, t)| (t, i)).collect();
        if events.len() < 3 {
            return Err(Error::TooFewInteractions {
                user: user_keys[u as usize].clone(),
                count: events.len(),
            });
        }
        events.sort_unstable();
        histories.push(events.into_iter().map(|(_, i)| i).collect());
    }
    InteractionDataset::from_histories(histories, item_keys.len(), user_keys, item_keys)
}

impl InteractionDataset {
    /// Builds a dataset from per-user chronological histories: the last item
    /// of each history is the test item, the one before it validation.
    pub fn from_histories(
        histories: Vec<Vec<u32>>,
        num_items: usize,
        user_keys: Vec<String>,
        item_keys: Vec<String>,
    ) -> Result<Self> {
        let mut train = Vec::new();
        let mut validation = Vec::with_capacity(histories.len());
        let mut test = Vec::with_capacity(histories.len());
        for (u, h) in histories.iter().enumerate() {
            if h.len() < 3 {
                return Err(Error::TooFewInteractions {
                    user: user_keys.get(u).cloned().unwrap_or_else(|| u.to_string()),
                    count: h.len(),
                });
            }
            let n = h.len();
            train.extend(h[..n - 2].iter().map(|&i| (u as u32, i)));
            validation.push(h[n - 2]);
            test.push(h[n - 1]);
        }
        Self::from_parts(
            histories.len(),
            num_items,
            train,
            validation,
            test,
            user_keys,
            item_keys,
        )
    }

    fn from_parts(
        num_users: usize,
        num_items: usize,
        train: Vec<(u32, u32)>,
        validation: Vec<u32>,
        test: Vec<u32>,
        user_keys: Vec<String>,
        item_keys: Vec<String>,
    ) -> Result<Self> {
        let bad = |msg: String| Error::IncompatibleDataset(msg);
        if user_keys.len() != num_users || item_keys.len() != num_items {
            return Err(bad("key table sizes disagree with header".into()));
        }
        if validation.len() != num_users || test.len() != num_users {
            return Err(bad("every user needs one validation and one test item".into()));
        }
        let mut histories: Vec<Vec<u32>> = vec![Vec::new(); num_users];
        let mut last_user = 0u32;
        for &(u, i) in &train {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(bad(format!("train pair ({u}, {i}) out of range")));
            }
            if u < last_user {
                return Err(bad("train pairs not grouped by user".into()));
            }
            last_user = u;
            histories[u as usize].push(i);
        }
        let mut seen_items = vec![false; num_items];
        for (u, h) in histories.iter_mut().enumerate() {
            for &i in [validation[u], test[u]].iter() {
                if i as usize >= num_items {
                    return Err(bad(format!("held-out item {i} out of range")));
                }
            }
            h.push(validation[u]);
            h.push(test[u]);
            let distinct: BTreeSet<u32> = h.iter().copied().collect();
            if distinct.len() != h.len() {
                return Err(bad(format!("user {u} has an item in more than one split")));
            }
            for &i in h.iter() {
                seen_items[i as usize] = true;
            }
        }
        if let Some(i) = seen_items.iter().position(|s| !s) {
            return Err(bad(format!("item {i} never appears in any split")));
        }
        let train_sorted = histories
            .iter()
            .map(|h| {
                let mut t = h[..h.len() - 2].to_vec();
                t.sort_unstable();
                t
            })
            .collect();
        Ok(InteractionDataset {
            num_users,
            num_items,
            train,
            validation,
            test,
            user_histories: histories,
            user_keys,
            item_keys,
            train_sorted,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn train(&self) -> &[(u32, u32)] {
        &self.train
    }

    pub fn validation(&self) -> &[u32] {
        &self.validation
    }

    pub fn test(&self) -> &[u32] {
        &self.test
    }

    pub fn heldout(&self, split: Split) -> &[u32] {
        match split {
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Chronological item list of a user, train items first.
    pub fn user_history(&self, user: usize) -> &[u32] {
        &self.user_histories[user]
    }

    /// Sorted train items of a user.
    pub fn train_items(&self, user: usize) -> &[u32] {
        &self.train_sorted[user]
    }

    pub fn is_train_pair(&self, user: usize, item: u32) -> bool {
        self.train_sorted[user].binary_search(&item).is_ok()
    }

    pub fn user_keys(&self) -> &[String] {
        &self.user_keys
    }

    pub fn item_keys(&self) -> &[String] {
        &self.item_keys
    }

    /// Fraction of the user-item grid that is observed across all splits.
    pub fn sparsity(&self) -> f64 {
        let observed = self.train.len() + self.validation.len() + self.test.len();
        observed as f64 / (self.num_users as f64 * self.num_items as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.num_users as u64).to_le_bytes())?;
        w.write_all(&(self.num_items as u64).to_le_bytes())?;
        write_pairs(w, self.train.iter().copied())?;
        write_pairs(w, self.validation.iter().enumerate().map(|(u, &i)| (u as u32, i)))?;
        write_pairs(w, self.test.iter().enumerate().map(|(u, &i)| (u as u32, i)))?;
        write_keys(w, &self.user_keys)?;
        write_keys(w, &self.item_keys)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        Self::read_inner(r).map_err(|e| match e {
            Error::Io(io) if io.kind() == io::ErrorKind::UnexpectedEof => {
                Error::IncompatibleDataset("truncated file".into())
            }
            other => other,
        })
    }

    fn read_inner<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::IncompatibleDataset("bad magic bytes".into()));
        }
        let version = read_u16(r)?;
        if version != DATASET_VERSION {
            return Err(Error::IncompatibleDataset(format!("unsupported version {version}")));
        }
        let num_users = read_u64(r)? as usize;
        let num_items = read_u64(r)? as usize;
        let train = read_pairs(r)?;
        let validation = heldout_from_pairs(read_pairs(r)?, num_users)?;
        let test = heldout_from_pairs(read_pairs(r)?, num_users)?;
        let user_keys = read_keys(r)?;
        let item_keys = read_keys(r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::IncompatibleDataset("trailing bytes".into()));
        }
        Self::from_parts(num_users, num_items, train, validation, test, user_keys, item_keys)
    }
}

fn heldout_from_pairs(pairs: Vec<(u32, u32)>, num_users: usize) -> Result<Vec<u32>> {
    if pairs.len() != num_users || pairs.iter().enumerate().any(|(u, &(pu, _))| pu as usize != u) {
        return Err(Error::IncompatibleDataset(
            "held-out split is not one item per user".into(),
        ));
    }
    Ok(pairs.into_iter().map(|(_, i)| i).collect())
}

fn write_pairs<W: Write>(w: &mut W, pairs: impl ExactSizeIterator<Item = (u32, u32)>) -> io::Result<()> {
    w.write_all(&(pairs.len() as u64).to_le_bytes())?;
    for (u, i) in pairs {
        w.write_all(&u.to_le_bytes())?;
        w.write_all(&i.to_le_bytes())?;
    }
    Ok(())
}

fn write_keys<W: Write>(w: &mut W, keys: &[String]) -> io::Result<()> {
    w.write_all(&(keys.len() as u64).to_le_bytes())?;
    for k in keys {
        w.write_all(&(k.len() as u32).to_le_bytes())?;
        w.write_all(k.as_bytes())?;
    }
    Ok(())
}

// Guards against absurd length prefixes in corrupted files.
const MAX_PREALLOC: usize = 1 << 20;

fn read_pairs<R: Read>(r: &mut R) -> Result<Vec<(u32, u32)>> {
    let n = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(n.min(MAX_PREALLOC));
    for _ in 0..n {
        out.push((read_u32(r)?, read_u32(r)?));
    }
    Ok(out)
}

fn read_keys<R: Read>(r: &mut R) -> Result<Vec<String>> {
    let n = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(n.min(MAX_PREALLOC));
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        let mut buf = Vec::with_capacity(len.min(MAX_PREALLOC));
        r.take(len as u64).read_to_end(&mut buf)?;
        if buf.len() != len {
            return Err(Error::IncompatibleDataset("truncated file".into()));
        }
        out.push(String::from_utf8(buf).map_err(|_| Error::IncompatibleDataset("key is not UTF-8".into()))?);
    }
    Ok(out)
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
