//! Bag-of-binary-words vocabulary and keyframe database.
//!
//! The vocabulary is a hierarchical k-medians clustering tree over 256-bit
//! binary descriptors (branching factor `kb`, depth `L`), with
//! inverse-document-frequency word weights. Keyframes are summarized as
//! L1-normalized tf-idf vectors over the leaf words and compared with
//! `s(u, v) = 1 - 0.5 * |u - v|_1`.

use rand::Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// 256-bit binary feature descriptor compared under Hamming distance.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BinaryDescriptor(pub [u8; 32]);

impl std::fmt::Debug for BinaryDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryDescriptor({})", self.to_hex())
    }
}

impl BinaryDescriptor {
    pub const BITS: usize = 256;

    pub fn zero() -> Self {
        BinaryDescriptor([0u8; 32])
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill(&mut bytes);
        BinaryDescriptor(bytes)
    }

    pub fn hamming(&self, other: &BinaryDescriptor) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// Copy with each bit independently flipped at the given rate.
    pub fn with_bit_flips<R: Rng>(&self, rng: &mut R, rate: f64) -> Self {
        let mut out = *self;
        for byte in 0..32 {
            for bit in 0..8 {
                if rng.gen_bool(rate) {
                    out.0[byte] ^= 1 << bit;
                }
            }
        }
        out
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 {
            return None;
        }
        let mut bytes = [0u8; 32];
        for (i, byte) in bytes.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
        }
        Some(BinaryDescriptor(bytes))
    }
}

#[derive(Debug, Error)]
pub enum VocabularyError {
    #[error("corpus of {got} descriptors is too small for kb^L = {need}")]
    CorpusTooSmall { got: usize, need: usize },
    #[error("invalid vocabulary file: {0}")]
    InvalidFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const NO_WORD: u32 = u32::MAX;

#[derive(Clone)]
struct Node {
    descriptor: BinaryDescriptor,
    first_child: u32,
    child_count: u32,
    word_id: u32,
    weight: f64,
}

/// Hierarchical clustering tree with idf word weights.
pub struct Vocabulary {
    branching: u32,
    depth: u32,
    nodes: Vec<Node>,
    n_words: u32,
}

/// Sparse L1-normalized tf-idf vector over vocabulary words.
pub type BowVector = Vec<(u32, f64)>;

impl Vocabulary {
    pub fn branching(&self) -> u32 {
        self.branching
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn word_count(&self) -> u32 {
        self.n_words
    }

    /// Builds the tree by recursive k-medians clustering in Hamming space.
    /// Cluster centers are per-bit majority medians; the whole construction
    /// is deterministic for a fixed seed.
    pub fn build(
        corpus: &[BinaryDescriptor],
        branching: u32,
        depth: u32,
        seed: u64,
    ) -> Result<Vocabulary, VocabularyError> {
        let need = (branching as usize).pow(depth);
        if corpus.len() < need {
            return Err(VocabularyError::CorpusTooSmall { got: corpus.len(), need });
        }
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

        let mut nodes = vec![Node {
            descriptor: BinaryDescriptor::zero(),
            first_child: 0,
            child_count: 0,
            word_id: NO_WORD,
            weight: 0.0,
        }];

        // Breadth-first build keeps each node's children contiguous.
        let mut queue: std::collections::VecDeque<(usize, Vec<usize>, u32)> =
            std::collections::VecDeque::new();
        queue.push_back((0, (0..corpus.len()).collect(), 0));
        let mut n_words = 0u32;

        while let Some((node_idx, indices, level)) = queue.pop_front() {
            if level == depth || indices.len() <= 1 {
                nodes[node_idx].word_id = n_words;
                n_words += 1;
                continue;
            }
            let clusters = kmedians(corpus, &indices, branching as usize, &mut rng);
            let first_child = nodes.len() as u32;
            nodes[node_idx].first_child = first_child;
            nodes[node_idx].child_count = clusters.len() as u32;
            for (center, members) in &clusters {
                nodes.push(Node {
                    descriptor: *center,
                    first_child: 0,
                    child_count: 0,
                    word_id: NO_WORD,
                    weight: 0.0,
                });
                let child_idx = nodes.len() - 1;
                queue.push_back((child_idx, members.clone(), level + 1));
            }
        }

        let mut vocab = Vocabulary { branching, depth, nodes, n_words };

        // idf weights from the training corpus.
        let mut counts = vec![0usize; n_words as usize];
        for d in corpus {
            let (word, _) = vocab.quantize(d);
            counts[word as usize] += 1;
        }
        let n = corpus.len() as f64;
        for node in &mut vocab.nodes {
            if node.word_id != NO_WORD {
                let c = counts[node.word_id as usize];
                node.weight = if c == 0 { 0.0 } else { (n / c as f64).ln() };
            }
        }
        Ok(vocab)
    }

    /// Maps a descriptor to its leaf word: `(word id, idf weight)`.
    pub fn quantize(&self, descriptor: &BinaryDescriptor) -> (u32, f64) {
        let mut node = &self.nodes[0];
        while node.child_count > 0 {
            let mut best = node.first_child as usize;
            let mut best_d = u32::MAX;
            for c in node.first_child..node.first_child + node.child_count {
                let d = self.nodes[c as usize].descriptor.hamming(descriptor);
                if d < best_d {
                    best_d = d;
                    best = c as usize;
                }
            }
            node = &self.nodes[best];
        }
        (node.word_id, node.weight)
    }

    /// Mean Hamming distance between descriptors and their leaf word
    /// centers. Zero-weighted leaves still count; the root (no children)
    /// yields the distance to the zero descriptor.
    pub fn quantization_distortion(&self, corpus: &[BinaryDescriptor]) -> f64 {
        if corpus.is_empty() {
            return 0.0;
        }
        let mut total = 0u64;
        for d in corpus {
            let mut node = &self.nodes[0];
            while node.child_count > 0 {
                let mut best = node.first_child as usize;
                let mut best_d = u32::MAX;
                for c in node.first_child..node.first_child + node.child_count {
                    let dist = self.nodes[c as usize].descriptor.hamming(d);
                    if dist < best_d {
                        best_d = dist;
                        best = c as usize;
                    }
                }
                node = &self.nodes[best];
            }
            total += node.descriptor.hamming(d) as u64;
        }
        total as f64 / corpus.len() as f64
    }

    /// tf-idf vector of a descriptor set, L1-normalized.
    pub fn transform(&self, descriptors: &[BinaryDescriptor]) -> BowVector {
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        for d in descriptors {
            let (word, weight) = self.quantize(d);
            if weight > 0.0 {
                *acc.entry(word).or_insert(0.0) += weight;
            }
        }
        let sum: f64 = acc.values().sum();
        if sum <= 0.0 {
            return Vec::new();
        }
        acc.into_iter().map(|(w, v)| (w, v / sum)).collect()
    }

    /// Similarity `1 - 0.5 * |u - v|_1` of two L1-normalized vectors; 1 for
    /// identical vectors, 0 for disjoint support.
    pub fn score(u: &BowVector, v: &BowVector) -> f64 {
        let mut l1 = 0.0;
        let (mut i, mut j) = (0usize, 0usize);
        while i < u.len() && j < v.len() {
            match u[i].0.cmp(&v[j].0) {
                std::cmp::Ordering::Less => {
                    l1 += u[i].1.abs();
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    l1 += v[j].1.abs();
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    l1 += (u[i].1 - v[j].1).abs();
                    i += 1;
                    j += 1;
                }
            }
        }
        for k in i..u.len() {
            l1 += u[k].1.abs();
        }
        for k in j..v.len() {
            l1 += v[k].1.abs();
        }
        1.0 - 0.5 * l1
    }

    /// Writes the versioned binary format: magic `SVBW`, branching, depth,
    /// node and word counts, then per node the raw 32-byte descriptor,
    /// child offset/count, word id and weight. Little-endian throughout.
    pub fn save(&self, path: &Path) -> Result<(), VocabularyError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"SVBW");
        buf.extend_from_slice(&self.branching.to_le_bytes());
        buf.extend_from_slice(&self.depth.to_le_bytes());
        buf.extend_from_slice(&(self.nodes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.n_words.to_le_bytes());
        for node in &self.nodes {
            buf.extend_from_slice(&node.descriptor.0);
            buf.extend_from_slice(&node.first_child.to_le_bytes());
            buf.extend_from_slice(&node.child_count.to_le_bytes());
            buf.extend_from_slice(&node.word_id.to_le_bytes());
            buf.extend_from_slice(&node.weight.to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary, VocabularyError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() < 20 || &buf[0..4] != b"SVBW" {
            return Err(VocabularyError::InvalidFile("bad magic".into()));
        }
        let rd_u32 = |off: usize| -> u32 {
            u32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
        };
        let branching = rd_u32(4);
        let depth = rd_u32(8);
        let n_nodes = rd_u32(12) as usize;
        let n_words = rd_u32(16);
        let node_size = 32 + 4 + 4 + 4 + 8;
        if buf.len() != 20 + n_nodes * node_size {
            return Err(VocabularyError::InvalidFile(format!(
                "expected {} bytes, found {}",
                20 + n_nodes * node_size,
                buf.len()
            )));
        }
        let mut nodes = Vec::with_capacity(n_nodes);
        for i in 0..n_nodes {
            let off = 20 + i * node_size;
            let mut desc = [0u8; 32];
            desc.copy_from_slice(&buf[off..off + 32]);
            let first_child = rd_u32(off + 32);
            let child_count = rd_u32(off + 36);
            let word_id = rd_u32(off + 40);
            let mut wb = [0u8; 8];
            wb.copy_from_slice(&buf[off + 44..off + 52]);
            nodes.push(Node {
                descriptor: BinaryDescriptor(desc),
                first_child,
                child_count,
                word_id,
                weight: f64::from_le_bytes(wb),
            });
        }
        Ok(Vocabulary { branching, depth, nodes, n_words })
    }
}

/// k-medians over a subset of the corpus. Returns (center, member indices)
/// per cluster.
///
/// Clustering runs over *distinct* descriptor values (duplicates move as one
/// unit and always share a leaf) with a per-cluster capacity of
/// `ceil(distinct / k)`, so a corpus of exactly `kb^L` distinct descriptors
/// splits into a balanced tree with one word each.
fn kmedians<R: Rng>(
    corpus: &[BinaryDescriptor],
    indices: &[usize],
    k: usize,
    rng: &mut R,
) -> Vec<(BinaryDescriptor, Vec<usize>)> {
    // Group duplicates; BTreeMap gives a deterministic value order.
    let mut groups: BTreeMap<[u8; 32], Vec<usize>> = BTreeMap::new();
    for &i in indices {
        groups.entry(corpus[i].0).or_default().push(i);
    }
    let values: Vec<BinaryDescriptor> = groups.keys().map(|b| BinaryDescriptor(*b)).collect();
    let members_of: Vec<&Vec<usize>> = groups.values().collect();
    let n = values.len();

    if n <= k {
        return values
            .iter()
            .zip(members_of.iter())
            .map(|(v, m)| (*v, (*m).clone()))
            .collect();
    }
    let capacity = n.div_ceil(k);

    // k-means++ style seeding over distinct values.
    let mut centers: Vec<BinaryDescriptor> = Vec::with_capacity(k);
    centers.push(values[rng.gen_range(0..n)]);
    while centers.len() < k {
        let dists: Vec<f64> = values
            .iter()
            .map(|v| {
                centers
                    .iter()
                    .map(|c| c.hamming(v) as f64)
                    .fold(f64::INFINITY, f64::min)
                    .powi(2)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        if total <= 0.0 {
            centers.push(values[rng.gen_range(0..n)]);
            continue;
        }
        let mut pick = rng.gen_range(0.0..total);
        let mut chosen = n - 1;
        for (i, &d) in dists.iter().enumerate() {
            if pick < d {
                chosen = i;
                break;
            }
            pick -= d;
        }
        centers.push(values[chosen]);
    }

    let mut assignment = vec![usize::MAX; n];
    for _round in 0..10 {
        // Capacity-bounded assignment: most decisive values first.
        let mut order: Vec<usize> = (0..n).collect();
        let margin = |i: usize| -> i64 {
            let mut ds: Vec<u32> = centers.iter().map(|c| c.hamming(&values[i])).collect();
            ds.sort_unstable();
            if ds.len() > 1 {
                ds[1] as i64 - ds[0] as i64
            } else {
                0
            }
        };
        order.sort_by_key(|&i| std::cmp::Reverse((margin(i), std::cmp::Reverse(i))));
        let mut load = vec![0usize; k];
        let mut new_assignment = vec![usize::MAX; n];
        for &i in &order {
            let mut ranked: Vec<(u32, usize)> = centers
                .iter()
                .enumerate()
                .map(|(ci, c)| (c.hamming(&values[i]), ci))
                .collect();
            ranked.sort_unstable();
            for (_, ci) in ranked {
                if load[ci] < capacity {
                    new_assignment[i] = ci;
                    load[ci] += 1;
                    break;
                }
            }
        }
        let changed = new_assignment != assignment;
        assignment = new_assignment;

        // Majority-median update weighted by duplicate multiplicity.
        for ci in 0..k {
            let mut weighted: Vec<usize> = Vec::new();
            for (i, &a) in assignment.iter().enumerate() {
                if a == ci {
                    weighted.extend_from_slice(members_of[i]);
                }
            }
            if !weighted.is_empty() {
                centers[ci] = majority_median(corpus, &weighted);
            }
        }
        if !changed {
            break;
        }
    }

    let mut clusters: Vec<(BinaryDescriptor, Vec<usize>)> =
        centers.iter().map(|c| (*c, Vec::new())).collect();
    for (i, &a) in assignment.iter().enumerate() {
        clusters[a].1.extend_from_slice(members_of[i]);
    }
    clusters.retain(|(_, members)| !members.is_empty());
    clusters
}

/// Per-bit majority vote; ties resolve to 0 so the result is deterministic.
fn majority_median(corpus: &[BinaryDescriptor], members: &[usize]) -> BinaryDescriptor {
    let mut counts = [0usize; 256];
    for &i in members {
        let d = &corpus[i];
        for byte in 0..32 {
            for bit in 0..8 {
                if d.0[byte] & (1 << bit) != 0 {
                    counts[byte * 8 + bit] += 1;
                }
            }
        }
    }
    let mut out = BinaryDescriptor::zero();
    let half = members.len();
    for (pos, &c) in counts.iter().enumerate() {
        if 2 * c > half {
            out.0[pos / 8] |= 1 << (pos % 8);
        }
    }
    out
}

/// Inverted-index database of keyframe BoW vectors.
#[derive(Default)]
pub struct KeyframeDatabase {
    vectors: BTreeMap<u64, BowVector>,
    inverted: BTreeMap<u32, Vec<u64>>,
}

impl KeyframeDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, keyframe: u64, vector: BowVector) {
        for (word, _) in &vector {
            self.inverted.entry(*word).or_default().push(keyframe);
        }
        self.vectors.insert(keyframe, vector);
    }

    pub fn vector(&self, keyframe: u64) -> Option<&BowVector> {
        self.vectors.get(&keyframe)
    }

    /// Scores every stored keyframe sharing at least one word with the
    /// query, best first; ties break toward the oldest keyframe.
    pub fn query(&self, vector: &BowVector, exclude: &dyn Fn(u64) -> bool) -> Vec<(u64, f64)> {
        let mut candidates: Vec<u64> = Vec::new();
        for (word, _) in vector {
            if let Some(kfs) = self.inverted.get(word) {
                for &kf in kfs {
                    if !candidates.contains(&kf) && !exclude(kf) {
                        candidates.push(kf);
                    }
                }
            }
        }
        let mut scored: Vec<(u64, f64)> = candidates
            .into_iter()
            .map(|kf| (kf, Vocabulary::score(vector, &self.vectors[&kf])))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored
    }
}
