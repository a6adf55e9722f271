//! Class knowledge graph: nodes with semantic vectors, undirected edges,
//! and a role per node.
//!
//! Text formats:
//! - edges: `name_a<TAB>name_b` per line, `#` starts a comment;
//! - embeddings: `name v1 v2 ... vc` per line, whitespace separated (an
//!   optional word2vec-style `count dim` header line is skipped);
//! - roles: `name<TAB>role` with role one of `known`, `unknown`, `aux`.
//!
//! Node order is the order of the roles file. Class indices number the
//! non-auxiliary nodes in that same order.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::tensor::{norm, Matrix, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Known,
    Unknown,
    #[serde(rename = "aux")]
    Auxiliary,
}

impl NodeRole {
    pub fn is_class(self) -> bool {
        !matches!(self, NodeRole::Auxiliary)
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeRole::Known => "known",
            NodeRole::Unknown => "unknown",
            NodeRole::Auxiliary => "aux",
        })
    }
}

impl FromStr for NodeRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "known" => Ok(NodeRole::Known),
            "unknown" => Ok(NodeRole::Unknown),
            "aux" => Ok(NodeRole::Auxiliary),
            other => Err(format!("unknown role `{other}` (expected known, unknown or aux)")),
        }
    }
}

/// Node indices grouped by role.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeRoleSplit {
    pub known: Vec<usize>,
    pub unknown: Vec<usize>,
    pub auxiliary: Vec<usize>,
}

/// Outcome of [`KnowledgeGraph::validate_reachability`].
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ReachabilityReport {
    /// Names of unknown nodes with no path to any known node.
    pub unreachable: Vec<String>,
}

impl ReachabilityReport {
    pub fn is_ok(&self) -> bool {
        self.unreachable.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    names: Vec<String>,
    roles: Vec<NodeRole>,
    vectors: Matrix,
    adjacency: Vec<Vec<usize>>,
    mask: Arc<[bool]>,
}

/// Scales `v` to unit length. Vectors already unit-length up to rounding
/// are kept bit-for-bit so that normalizing twice is a no-op.
fn normalize_in_place(v: &mut [f64]) {
    let n = norm(v);
    if n < NORM_EPS || (n - 1.0).abs() <= 8.0 * f64::EPSILON {
        return;
    }
    v.iter_mut().for_each(|x| *x /= n);
}

impl KnowledgeGraph {
    /// Builds a graph from per-node data and an edge list over node
    /// indices. Edges are made symmetric and deduplicated; self-edges are
    /// dropped since every neighborhood contains its center anyway.
    /// Semantic vectors are L2-normalized.
    pub fn new(
        names: Vec<String>,
        roles: Vec<NodeRole>,
        mut vectors: Matrix,
        edges: &[(usize, usize)],
    ) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(usage("graph has no nodes"));
        }
        if roles.len() != n || vectors.rows() != n {
            return Err(Error::Format(format!(
                "graph with {n} names has {} roles and {} vectors",
                roles.len(),
                vectors.rows()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|name| !seen.insert(name.as_str())) {
            return Err(Error::Format(format!("duplicate node name `{dup}`")));
        }
        for r in 0..n {
            normalize_in_place(vectors.row_mut(r));
        }
        let mut sets = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(usage(format!("edge ({a}, {b}) out of range for {n} nodes")));
            }
            if a != b {
                sets[a].insert(b);
                sets[b].insert(a);
            }
        }
        let adjacency: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let mut mask = vec![false; n * n];
        for (i, nbrs) in adjacency.iter().enumerate() {
            mask[i * n + i] = true;
            for &j in nbrs {
                mask[i * n + j] = true;
            }
        }
        Ok(Self {
            names,
            roles,
            vectors,
            adjacency,
            mask: mask.into(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    /// Semantic vector dimension.
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn roles(&self) -> &[NodeRole] {
        &self.roles
    }

    /// Node semantic vectors, one row per node.
    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    /// Sorted neighbor lists without the node itself.
    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Row-major `n x n` membership mask of `A + I`.
    pub fn neighborhood_mask(&self) -> Arc<[bool]> {
        Arc::clone(&self.mask)
    }

    /// First-order neighbors of `i` plus `i` itself, ascending.
    pub fn neighborhood(&self, i: usize) -> Result<Vec<usize>> {
        if i >= self.node_count() {
            return Err(usage(format!("node {i} out of range for {} nodes", self.node_count())));
        }
        let mut out = self.adjacency[i].clone();
        let pos = out.binary_search(&i).unwrap_err();
        out.insert(pos, i);
        Ok(out)
    }

    pub fn split(&self) -> NodeRoleSplit {
        let pick = |role| {
            (0..self.node_count())
                .filter(|&i| self.roles[i] == role)
                .collect::<Vec<_>>()
        };
        NodeRoleSplit {
            known: pick(NodeRole::Known),
            unknown: pick(NodeRole::Unknown),
            auxiliary: pick(NodeRole::Auxiliary),
        }
    }

    /// Node index of each class, in class-index order.
    pub fn class_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&i| self.roles[i].is_class()).collect()
    }

    pub fn class_count(&self) -> usize {
        self.roles.iter().filter(|r| r.is_class()).count()
    }

    /// Class indices whose node is `known`.
    pub fn known_classes(&self) -> Vec<usize> {
        self.class_nodes()
            .iter()
            .enumerate()
            .filter(|(_, &node)| self.roles[node] == NodeRole::Known)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn unknown_classes(&self) -> Vec<usize> {
        self.class_nodes()
            .iter()
            .enumerate()
            .filter(|(_, &node)| self.roles[node] == NodeRole::Unknown)
            .map(|(c, _)| c)
            .collect()
    }

    /// Checks that every unknown node is connected to some known node.
    pub fn validate_reachability(&self, split: &NodeRoleSplit) -> ReachabilityReport {
        let n = self.node_count();
        let mut reached = vec![false; n];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for &k in &split.known {
            if k < n && !reached[k] {
                reached[k] = true;
                queue.push_back(k);
            }
        }
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if !reached[v] {
                    reached[v] = true;
                    queue.push_back(v);
                }
            }
        }
        ReachabilityReport {
            unreachable: split
                .unknown
                .iter()
                .filter(|&&u| u >= n || !reached[u])
                .map(|&u| self.names.get(u).cloned().unwrap_or_else(|| format!("#{u}")))
                .collect(),
        }
    }

    /// Relabels nodes so that node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.node_count();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..n).collect::<Vec<_>>() {
            return Err(usage("not a permutation of the node indices"));
        }
        let mut names = vec![String::new(); n];
        let mut roles = vec![NodeRole::Auxiliary; n];
        let mut vectors = Matrix::zeros(n, self.dim());
        for i in 0..n {
            names[perm[i]] = self.names[i].clone();
            roles[perm[i]] = self.roles[i];
            vectors.row_mut(perm[i]).copy_from_slice(self.vectors.row(i));
        }
        let edges: Vec<(usize, usize)> = self
            .adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, nbrs)| nbrs.iter().map(move |&j| (perm[i], perm[j])))
            .collect();
        Self::new(names, roles, vectors, &edges)
    }

    /// Writes the three text files read by [`load_graph`].
    pub fn write(&self, edge_file: &Path, embedding_file: &Path, roles_file: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(edge_file)?);
        for (i, nbrs) in self.adjacency.iter().enumerate() {
            for &j in nbrs.iter().filter(|&&j| j > i) {
                writeln!(w, "{}\t{}", self.names[i], self.names[j])?;
            }
        }
        w.flush()?;

        let mut w = BufWriter::new(File::create(embedding_file)?);
        for (i, name) in self.names.iter().enumerate() {
            write!(w, "{name}")?;
            for v in self.vectors.row(i) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;

        let mut w = BufWriter::new(File::create(roles_file)?);
        for (name, role) in self.names.iter().zip(&self.roles) {
            writeln!(w, "{name}\t{role}")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn split_pair(line: &str) -> Option<(&str, &str)> {
    let (a, b) = match line.split_once('\t') {
        Some(pair) => pair,
        None => {
            let mut it = line.split_whitespace();
            let a = it.next()?;
            let b = it.next()?;
            if it.next().is_some() {
                return None;
            }
            return Some((a, b));
        }
    };
    let (a, b) = (a.trim(), b.trim());
    (!a.is_empty() && !b.is_empty() && !b.contains('\t')).then_some((a, b))
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses a roles file into ordered `(name, role)` entries.
pub fn parse_roles<R: BufRead>(reader: R, path: &Path) -> Result<Vec<(String, NodeRole)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let body = strip_comment(&line).trim();
        if body.is_empty() {
            continue;
        }
        let (name, role) = split_pair(body)
            .ok_or_else(|| parse_error(path, i + 1, "expected `name<TAB>role`"))?;
        let role: NodeRole = role.parse().map_err(|e: String| parse_error(path, i + 1, e))?;
        if !seen.insert(name.to_string()) {
            return Err(parse_error(path, i + 1, format!("node `{name}` listed twice")));
        }
        out.push((name.to_string(), role));
    }
    Ok(out)
}

/// Parses an edge file against a name-to-index map.
pub fn parse_edges<R: BufRead>(
    reader: R,
    path: &Path,
    index: &HashMap<String, usize>,
) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let body = strip_comment(&line).trim();
        if body.is_empty() {
            continue;
        }
        let (a, b) = split_pair(body)
            .ok_or_else(|| parse_error(path, i + 1, "expected `name_a<TAB>name_b`"))?;
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| parse_error(path, i + 1, format!("unknown node `{name}`")))
        };
        out.push((lookup(a)?, lookup(b)?));
    }
    Ok(out)
}

/// Reads embeddings for the requested names. Lines for other words are
/// skipped after a dimension check.
pub fn parse_embeddings<R: BufRead>(
    reader: R,
    path: &Path,
    wanted: &HashMap<String, usize>,
) -> Result<(Matrix, Vec<String>)> {
    let mut dim: Option<usize> = None;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; wanted.len()];
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut tokens = line.split_whitespace();
        let Some(word) = tokens.next() else { continue };
        let values: Vec<&str> = tokens.collect();
        if i == 0 && values.len() == 1 && word.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            continue;
        }
        if values.is_empty() {
            return Err(parse_error(path, i + 1, format!("`{word}` has no vector components")));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Format(format!(
                    "{}:{}: embedding for `{word}` has {} components, expected {d}",
                    path.display(),
                    i + 1,
                    values.len()
                )))
            }
            Some(_) => {}
        }
        let Some(&slot) = wanted.get(word) else { continue };
        let parsed = values
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse_error(path, i + 1, format!("bad component `{v}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows[slot] = Some(parsed);
    }

    let mut by_slot: Vec<(&String, usize)> = wanted.iter().map(|(k, &v)| (k, v)).collect();
    by_slot.sort_by_key(|&(_, v)| v);
    let missing: Vec<String> = by_slot
        .iter()
        .filter(|&&(_, slot)| rows[slot].is_none())
        .map(|&(name, _)| name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingEmbedding(missing));
    }
    let d = dim.unwrap_or(0);
    let data: Vec<f64> = rows.into_iter().flatten().flatten().collect();
    let names = by_slot.into_iter().map(|(k, _)| k.clone()).collect();
    Ok((Matrix::from_vec(wanted.len(), d, data)?, names))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Loads a graph from edge, embedding and roles files.
pub fn load_graph(edge_file: &Path, embedding_file: &Path, roles_file: &Path) -> Result<KnowledgeGraph> {
    let roles = parse_roles(open(roles_file)?, roles_file)?;
    let index: HashMap<String, usize> = roles
        .iter()
        .enumerate()
        .map(|(i, (name, _))| (name.clone(), i))
        .collect();
    let edges = parse_edges(open(edge_file)?, edge_file, &index)?;
    let (vectors, _) = parse_embeddings(open(embedding_file)?, embedding_file, &index)?;
    let (names, roles): (Vec<String>, Vec<NodeRole>) = roles.into_iter().unzip();
    KnowledgeGraph::new(names, roles, vectors, &edges)
}

/// The three file paths of a graph stored under one directory.
#[derive(Clone, Debug)]
pub struct GraphFiles {
    pub edges: PathBuf,
    pub embeddings: PathBuf,
    pub roles: PathBuf,
}

impl GraphFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            edges: dir.join("edges.tsv"),
            embeddings: dir.join("embeddings.txt"),
            roles: dir.join("roles.tsv"),
        }
    }

    pub fn load(&self) -> Result<KnowledgeGraph> {
        load_graph(&self.edges, &self.embeddings, &self.roles)
    }

    pub fn write(&self, g: &KnowledgeGraph) -> Result<()> {
        g.write(&self.edges, &self.embeddings, &self.roles)
    }
}
