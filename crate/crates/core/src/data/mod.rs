//! Dataset ingestion and non-i.i.d. partitioning across clients.

mod adult;
mod mnist;
mod synth;

use std::collections::{BTreeSet, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adult::{load_adult, AdultLoad, AdultOptions, ADULT_ENCODING_VERSION, ADULT_FEATURES};
pub use mnist::{load_mnist, read_idx_images, read_idx_labels, MNIST_FEATURES};
pub use synth::{synth_generate, SynthSpec};

use crate::error::{FedError, Result};
use crate::model::Sample;
use crate::rng::{stream, Purpose};

/// Train/test split with its shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub classes: usize,
    /// Feature dimension including the bias entry.
    pub features: usize,
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub owner: usize,
    pub samples: Vec<Sample>,
    pub label_set: BTreeSet<usize>,
}

impl Shard {
    pub fn new(owner: usize, samples: Vec<Sample>) -> Self {
        let label_set = samples.iter().map(|s| s.label).collect();
        Shard {
            owner,
            samples,
            label_set,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PartitionScheme {
    /// Each client holds exactly `labels` distinct classes.
    LabelsPerClient { labels: usize },
    /// Each client holds a single class; clients are apportioned to classes
    /// in proportion to class frequency.
    OneClass,
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub n_clients: usize,
    pub per_client_size: usize,
    pub seed: u64,
}

/// Splits `train` into `n_clients` disjoint shards of `per_client_size`.
pub fn partition(train: &[Sample], spec: &PartitionSpec) -> Result<Vec<Shard>> {
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let assignment = partition_indices(&labels, spec)?;
    Ok(assignment
        .into_iter()
        .enumerate()
        .map(|(owner, idx)| Shard::new(owner, idx.into_iter().map(|i| train[i].clone()).collect()))
        .collect())
}

/// Index-level partition: entry `i` lists the sample indices owned by client `i`.
pub fn partition_indices(labels: &[usize], spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let n = spec.n_clients;
    let size = spec.per_client_size;
    if n == 0 || size == 0 {
        return Err(FedError::config("partition needs at least one client and a positive shard size"));
    }
    if n * size > labels.len() {
        return Err(FedError::config(format!(
            "{n} clients x {size} samples exceeds the {} available",
            labels.len()
        )));
    }
    let mut rng = stream(spec.seed, Purpose::Partition, &[]);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for c in by_class.iter_mut() {
        c.shuffle(&mut rng);
    }

    match spec.scheme {
        PartitionScheme::Iid => {
            let mut all: Vec<usize> = (0..labels.len()).collect();
            all.shuffle(&mut rng);
            Ok(all.chunks(size).take(n).map(<[usize]>::to_vec).collect())
        }
        PartitionScheme::OneClass => {
            let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
            let per_class = apportion_clients(&counts, n, size)?;
            let mut owners: Vec<usize> = per_class
                .iter()
                .enumerate()
                .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
                .collect();
            owners.shuffle(&mut rng);
            let mut cursor = vec![0usize; classes];
            Ok(owners
                .into_iter()
                .map(|c| {
                    let start = cursor[c];
                    cursor[c] += size;
                    by_class[c][start..start + size].to_vec()
                })
                .collect())
        }
        PartitionScheme::LabelsPerClient { labels: l } => {
            if l == 0 || l > classes {
                return Err(FedError::config(format!("cannot give {l} labels per client with {classes} classes")));
            }
            if l > size {
                return Err(FedError::config(format!("shard size {size} cannot hold {l} labels")));
            }
            let sets: Vec<Vec<usize>> = (0..n).map(|i| (0..l).map(|j| (i * l + j) % classes).collect()).collect();
            let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
            let quotas = label_quotas(&sets, &counts, size)?;
            let mut cursor = vec![0usize; classes];
            Ok(sets
                .iter()
                .zip(&quotas)
                .map(|(set, q)| {
                    let mut idx = Vec::with_capacity(size);
                    for (&c, &take) in set.iter().zip(q) {
                        idx.extend_from_slice(&by_class[c][cursor[c]..cursor[c] + take]);
                        cursor[c] += take;
                    }
                    idx
                })
                .collect())
        }
    }
}

/// Largest-remainder apportionment of `n` clients to classes, respecting
/// how many full shards each class can fill.
fn apportion_clients(counts: &[usize], n: usize, size: usize) -> Result<Vec<usize>> {
    let capacity: Vec<usize> = counts.iter().map(|c| c / size).collect();
    if capacity.iter().sum::<usize>() < n {
        return Err(FedError::config(format!(
            "one-class partition infeasible: classes fill only {} shards of {size}, need {n}",
            capacity.iter().sum::<usize>()
        )));
    }
    let total: usize = counts.iter().sum();
    let ideal: Vec<f64> = counts.iter().map(|&c| n as f64 * c as f64 / total as f64).collect();
    let mut alloc: Vec<usize> = ideal.iter().zip(&capacity).map(|(x, &cap)| (x.floor() as usize).min(cap)).collect();
    while alloc.iter().sum::<usize>() < n {
        // next client goes to the class furthest below its ideal share that still has room
        let best = (0..counts.len())
            .filter(|&c| alloc[c] < capacity[c])
            .max_by(|&a, &b| (ideal[a] - alloc[a] as f64).total_cmp(&(ideal[b] - alloc[b] as f64)).then(b.cmp(&a)))
            .expect("capacity checked above");
        alloc[best] += 1;
    }
    Ok(alloc)
}

/// Integer per-client, per-label sample counts such that every client gets
/// exactly `size` samples with at least one from each of its labels, and no
/// class is over-drawn. Fractional proportions come from alternating row and
/// column scaling; rounding excess is then routed to classes with spare
/// samples along augmenting paths.
fn label_quotas(sets: &[Vec<usize>], counts: &[usize], size: usize) -> Result<Vec<Vec<usize>>> {
    let classes = counts.len();
    let mut users = vec![0usize; classes];
    for set in sets {
        for &c in set {
            users[c] += 1;
        }
    }
    let mut z: Vec<Vec<f64>> = sets
        .iter()
        .map(|set| set.iter().map(|&c| counts[c] as f64 / users[c] as f64).collect())
        .collect();
    for _ in 0..2000 {
        for row in z.iter_mut() {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v *= size as f64 / s);
            }
        }
        let mut col = vec![0.0; classes];
        for (set, row) in sets.iter().zip(&z) {
            for (&c, v) in set.iter().zip(row) {
                col[c] += v;
            }
        }
        let mut worst: f64 = 0.0;
        for c in 0..classes {
            if col[c] > counts[c] as f64 {
                worst = worst.max(col[c] / counts[c] as f64 - 1.0);
            }
        }
        if worst < 1e-12 {
            break;
        }
        for (set, row) in sets.iter().zip(z.iter_mut()) {
            for (&c, v) in set.iter().zip(row.iter_mut()) {
                if col[c] > counts[c] as f64 {
                    *v *= counts[c] as f64 / col[c];
                }
            }
        }
    }

    // Round each row to exactly `size`, at least 1 per label.
    let mut q: Vec<Vec<usize>> = z
        .iter()
        .map(|row| {
            let mut ints: Vec<usize> = row.iter().map(|v| (v.floor() as usize).max(1)).collect();
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| (row[b] - row[b].floor()).total_cmp(&(row[a] - row[a].floor())).then(a.cmp(&b)));
            let mut k = 0;
            while ints.iter().sum::<usize>() < size {
                ints[order[k % order.len()]] += 1;
                k += 1;
            }
            while ints.iter().sum::<usize>() > size {
                let j = (0..ints.len()).filter(|&j| ints[j] > 1).max_by_key(|&j| ints[j]).expect("size >= labels");
                ints[j] -= 1;
            }
            ints
        })
        .collect();

    // Route excess from over-drawn classes to classes with slack.
    let mut col = vec![0usize; classes];
    for (set, row) in sets.iter().zip(&q) {
        for (&c, &v) in set.iter().zip(row) {
            col[c] += v;
        }
    }
    while let Some(over) = (0..classes).find(|&c| col[c] > counts[c]) {
        // BFS over classes; an edge c -> c' through client i moves one
        // sample of client i from class c to class c'.
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; classes];
        let mut seen = vec![false; classes];
        seen[over] = true;
        let mut queue = VecDeque::from([over]);
        let mut target = None;
        'bfs: while let Some(c) = queue.pop_front() {
            for (i, set) in sets.iter().enumerate() {
                let Some(pos) = set.iter().position(|&x| x == c) else { continue };
                if q[i][pos] <= 1 {
                    continue;
                }
                for &next in set {
                    if seen[next] {
                        continue;
                    }
                    seen[next] = true;
                    prev[next] = Some((c, i));
                    if col[next] < counts[next] {
                        target = Some(next);
                        break 'bfs;
                    }
                    queue.push_back(next);
                }
            }
        }
        let Some(mut c) = target else {
            return Err(FedError::config("labels-per-client partition infeasible for the class counts"));
        };
        col[c] += 1;
        col[over] -= 1;
        while let Some((from, i)) = prev[c] {
            let to_pos = sets[i].iter().position(|&x| x == c).expect("edge endpoint");
            let from_pos = sets[i].iter().position(|&x| x == from).expect("edge endpoint");
            q[i][to_pos] += 1;
            q[i][from_pos] -= 1;
            c = from;
        }
    }
    Ok(q)
}

/// Writes samples as `label,f0,...,f{n-1}` rows.
pub fn write_samples_csv(samples: &[Sample], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let n = samples.first().map_or(0, Sample::dim);
    write!(out, "label")?;
    for j in 0..n {
        write!(out, ",f{j}")?;
    }
    writeln!(out)?;
    for s in samples {
        write!(out, "{}", s.label)?;
        for v in s.features.iter() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
