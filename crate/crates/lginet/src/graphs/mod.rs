//! Graph construction from dependency parses.
//!
//! Three graphs per sample: the merged-aspect syntax graph (multi-word
//! aspects collapse to a single node whose row/column is the binarized sum
//! of the aspect rows), the star-shaped relation graph with a reversed edge
//! per node, and the stitched pair with its interactive edges.

pub mod conllu;
pub mod dataset;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};

pub use conllu::{parse_conllu, SentenceSkeleton};

/// One (sentence, aspect, label) instance with its dependency parse.
/// `heads[i]` is the 0-based head of token `i`, `None` for the root.
/// `aspect` is a half-open token range; `label` is 0 negative, 1 neutral,
/// 2 positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseSample {
    pub tokens: Vec<String>,
    pub heads: Vec<Option<usize>>,
    pub deprels: Vec<String>,
    pub aspect: (usize, usize),
    pub label: u8,
}

impl ParseSample {
    pub fn from_skeleton(
        skel: SentenceSkeleton,
        aspect: (usize, usize),
        label: u8,
    ) -> Result<Self> {
        let sample = ParseSample {
            tokens: skel.tokens,
            heads: skel.heads,
            deprels: skel.deprels,
            aspect,
            label,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn aspect_len(&self) -> usize {
        self.aspect.1 - self.aspect.0
    }

    /// Node count after aspect merging.
    pub fn n_merged(&self) -> usize {
        self.n_tokens() - self.aspect_len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::data("sample has no tokens"));
        }
        if self.heads.len() != n || self.deprels.len() != n {
            return Err(Error::data(format!(
                "tokens/heads/deprels lengths differ: {}/{}/{}",
                n,
                self.heads.len(),
                self.deprels.len()
            )));
        }
        let (a, b) = self.aspect;
        if a >= b || b > n {
            return Err(Error::data(format!(
                "aspect span [{a}, {b}) invalid for {n} tokens"
            )));
        }
        if self.label > 2 {
            return Err(Error::data(format!(
                "label {} outside {{0, 1, 2}}",
                self.label
            )));
        }
        let roots = self.heads.iter().filter(|h| h.is_none()).count();
        if roots != 1 {
            return Err(Error::data(format!(
                "expected exactly one root, found {roots}"
            )));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if let Some(h) = h {
                if *h >= n {
                    return Err(Error::data(format!(
                        "token {i} has head {h} out of range for {n} tokens"
                    )));
                }
                if *h == i {
                    return Err(Error::data(format!("token {i} is its own head")));
                }
            }
        }
        // Every head chain must terminate at the root within n steps.
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(h) = self.heads[cur] {
                cur = h;
                steps += 1;
                if steps > n {
                    return Err(Error::data(format!("head cycle involving token {start}")));
                }
            }
        }
        Ok(())
    }
}

/// Merged-aspect undirected adjacency over `n = N_c - N_a + 1` nodes.
/// `tau` indexes the merged aspect node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntaxGraph {
    pub n: usize,
    pub tau: usize,
    pub adj: Vec<Vec<u8>>,
}

impl SyntaxGraph {
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj[i]
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(j, _)| j)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].iter().filter(|&&v| v != 0).count()
    }
}

/// Bidirectional relation-string <-> id map. Ids follow sorted-string order,
/// so they are stable for a given training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct RelationVocab {
    strings: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for RelationVocab {
    fn from(strings: Vec<String>) -> Self {
        let index = strings
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        RelationVocab { strings, index }
    }
}

impl From<RelationVocab> for Vec<String> {
    fn from(v: RelationVocab) -> Vec<String> {
        v.strings
    }
}

impl RelationVocab {
    /// Builds the vocabulary from the relation labels of a training split.
    /// The distance buckets `2:con ..= max_bucket:con` and `disc:con` are
    /// always present (with their reversed forms) so unseen test-time
    /// relations have somewhere to land.
    pub fn build<'a>(labels: impl IntoIterator<Item = &'a str>, max_bucket: u32) -> Self {
        let mut set: std::collections::BTreeSet<String> =
            labels.into_iter().map(|s| s.to_string()).collect();
        for n in 2..=max_bucket.max(2) {
            set.insert(format!("{n}:con"));
        }
        set.insert("disc:con".to_string());
        let mut full = std::collections::BTreeSet::new();
        for s in &set {
            full.insert(s.clone());
            full.insert(format!("rv:{s}"));
        }
        RelationVocab::from(full.into_iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    pub fn get(&self, s: &str) -> Option<u32> {
        self.index.get(s).copied()
    }

    pub fn string(&self, id: u32) -> Option<&str> {
        self.strings.get(id as usize).map(String::as_str)
    }

    pub fn strings(&self) -> &[String] {
        &self.strings
    }

    /// Looks up a relation string, mapping anything unseen to the cap
    /// bucket (preserving the `rv:` prefix).
    pub fn lookup_or_bucket(&self, s: &str, max_bucket: u32) -> Result<u32> {
        if let Some(id) = self.get(s) {
            return Ok(id);
        }
        let fallback = if s.starts_with("rv:") {
            format!("rv:{max_bucket}:con")
        } else {
            format!("{max_bucket}:con")
        };
        self.get(&fallback).ok_or_else(|| {
            Error::config(format!(
                "relation {s:?} unseen and cap bucket {fallback:?} missing from vocabulary"
            ))
        })
    }
}

/// Star-shaped relation graph: each non-aspect node carries one relation id
/// toward the aspect node and one reversed id. Entries at `tau` are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationGraph {
    pub n: usize,
    pub tau: usize,
    pub rel: Vec<Option<u32>>,
    pub rel_rv: Vec<Option<u32>>,
    pub vocab: RelationVocab,
}

/// Interactive-edge wiring between the two graphs: aligned counterparts or
/// complete bipartite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractiveMode {
    OneToOne,
    OneToAll,
}

/// The stitched pair: syntax graph, relation graph, and the interactive-edge
/// mode. Interactive edges never participate in intra-graph passing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lgig {
    pub syntax: SyntaxGraph,
    pub relation: RelationGraph,
    pub mode: InteractiveMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphSide {
    Syntax,
    Relation,
}

/// Edge label cases when enumerating the stitched graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EdgeLabel {
    /// Intra-syntax edge.
    Syntax,
    /// Cross-graph interactive edge.
    Interactive,
    /// Relation edge into the aspect node.
    Relation(u32),
    /// Reversed edge out of the aspect node.
    ReversedRelation(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgigEdge {
    pub from: (GraphSide, usize),
    pub to: (GraphSide, usize),
    pub label: EdgeLabel,
}

impl Lgig {
    /// Directed edge list reproducing the four label cases.
    pub fn edges(&self) -> Vec<LgigEdge> {
        let n = self.syntax.n;
        let tau = self.syntax.tau;
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.syntax.adj[i][j] != 0 {
                    out.push(LgigEdge {
                        from: (GraphSide::Syntax, i),
                        to: (GraphSide::Syntax, j),
                        label: EdgeLabel::Syntax,
                    });
                }
            }
        }
        for i in 0..n {
            if i == tau {
                continue;
            }
            let rel = self.relation.rel[i].expect("non-aspect node has a relation");
            let rv = self.relation.rel_rv[i].expect("non-aspect node has a reversed relation");
            out.push(LgigEdge {
                from: (GraphSide::Relation, i),
                to: (GraphSide::Relation, tau),
                label: EdgeLabel::Relation(rel),
            });
            out.push(LgigEdge {
                from: (GraphSide::Relation, tau),
                to: (GraphSide::Relation, i),
                label: EdgeLabel::ReversedRelation(rv),
            });
        }
        match self.mode {
            InteractiveMode::OneToOne => {
                for i in 0..n {
                    out.push(LgigEdge {
                        from: (GraphSide::Syntax, i),
                        to: (GraphSide::Relation, i),
                        label: EdgeLabel::Interactive,
                    });
                    out.push(LgigEdge {
                        from: (GraphSide::Relation, i),
                        to: (GraphSide::Syntax, i),
                        label: EdgeLabel::Interactive,
                    });
                }
            }
            InteractiveMode::OneToAll => {
                for i in 0..n {
                    for j in 0..n {
                        out.push(LgigEdge {
                            from: (GraphSide::Syntax, i),
                            to: (GraphSide::Relation, j),
                            label: EdgeLabel::Interactive,
                        });
                        out.push(LgigEdge {
                            from: (GraphSide::Relation, i),
                            to: (GraphSide::Syntax, j),
                            label: EdgeLabel::Interactive,
                        });
                    }
                }
            }
        }
        out
    }

    /// GraphViz rendering for inspection.
    pub fn to_dot(&self, tokens: Option<&[String]>) -> String {
        let n = self.syntax.n;
        let name = |side: GraphSide, i: usize| match side {
            GraphSide::Syntax => format!("x{i}"),
            GraphSide::Relation => format!("y{i}"),
        };
        let label = |i: usize| -> String {
            match tokens {
                Some(toks) if i < toks.len() => toks[i].clone(),
                _ => format!("v{i}"),
            }
        };
        let mut s = String::from("digraph lgig {\n");
        for (side, prefix) in [(GraphSide::Syntax, "x"), (GraphSide::Relation, "y")] {
            s.push_str(&format!("  subgraph cluster_{prefix} {{\n"));
            for i in 0..n {
                let shape = if i == self.syntax.tau {
                    "doublecircle"
                } else {
                    "circle"
                };
                s.push_str(&format!(
                    "    {} [label=\"{}\", shape={}];\n",
                    name(side, i),
                    label(i),
                    shape
                ));
            }
            s.push_str("  }\n");
        }
        for e in self.edges() {
            let style = match &e.label {
                EdgeLabel::Syntax => "[color=black]".to_string(),
                EdgeLabel::Interactive => "[color=gray, style=dashed]".to_string(),
                EdgeLabel::Relation(r) => format!(
                    "[color=blue, label=\"{}\"]",
                    self.relation.vocab.string(*r).unwrap_or("?")
                ),
                EdgeLabel::ReversedRelation(r) => format!(
                    "[color=red, label=\"{}\"]",
                    self.relation.vocab.string(*r).unwrap_or("?")
                ),
            };
            s.push_str(&format!(
                "  {} -> {} {};\n",
                name(e.from.0, e.from.1),
                name(e.to.0, e.to.1),
                style
            ));
        }
        s.push_str("}\n");
        s
    }
}

/// Undirected adjacency of the original parse: one edge per non-root token,
/// dependency direction discarded.
pub fn build_base_adjacency(p: &ParseSample) -> Vec<Vec<u8>> {
    let n = p.n_tokens();
    let mut m = vec![vec![0u8; n]; n];
    for (i, h) in p.heads.iter().enumerate() {
        if let Some(h) = h {
            m[i][*h] = 1;
            m[*h][i] = 1;
        }
    }
    m
}

/// Collapses the aspect span to a single node. The merged node's row/column
/// is the binarized sum over the aspect rows/columns; it lands at index
/// `a_start` so the linear token order (and hence node offsets) stays
/// meaningful. Entries internal to the aspect vanish and the diagonal is
/// forced to zero.
#[allow(clippy::needless_range_loop)]
pub fn merge_aspect(base: &[Vec<u8>], span: (usize, usize)) -> Result<SyntaxGraph> {
    let n_c = base.len();
    let (a, b) = span;
    if a >= b || b > n_c {
        return Err(Error::contract(format!(
            "aspect span [{a}, {b}) out of bounds for {n_c} tokens"
        )));
    }
    let n_a = b - a;
    if n_a == n_c {
        return Err(Error::contract(
            "aspect span covers every token; no context remains",
        ));
    }
    let n = n_c - n_a + 1;
    let tau = a;
    // original context index -> merged index
    let remap = |i: usize| -> usize {
        if i < a {
            i
        } else {
            i - (n_a - 1)
        }
    };
    let mut adj = vec![vec![0u8; n]; n];
    for i in 0..n_c {
        if (a..b).contains(&i) {
            continue;
        }
        let mi = remap(i);
        for j in 0..n_c {
            if (a..b).contains(&j) {
                continue;
            }
            adj[mi][remap(j)] = base[i][j];
        }
        // Binarized sum over aspect rows/columns (s >= 1 -> 1).
        let s_col: u32 = (a..b).map(|k| base[k][i] as u32).sum();
        let s_row: u32 = (a..b).map(|k| base[i][k] as u32).sum();
        adj[tau][mi] = (s_col >= 1) as u8;
        adj[mi][tau] = (s_row >= 1) as u8;
    }
    adj[tau][tau] = 0;
    Ok(SyntaxGraph { n, tau, adj })
}

/// Base adjacency then merge, for one sample.
pub fn syntax_graph(p: &ParseSample) -> Result<SyntaxGraph> {
    merge_aspect(&build_base_adjacency(p), p.aspect)
}

/// BFS hop counts from the merged aspect node. `None` marks unreachable
/// nodes.
pub fn aspect_distances(sg: &SyntaxGraph) -> Vec<Option<u32>> {
    let mut dist = vec![None; sg.n];
    let mut queue = VecDeque::new();
    dist[sg.tau] = Some(0);
    queue.push_back(sg.tau);
    while let Some(i) = queue.pop_front() {
        let d = dist[i].unwrap();
        for j in sg.neighbors(i) {
            if dist[j].is_none() {
                dist[j] = Some(d + 1);
                queue.push_back(j);
            }
        }
    }
    dist
}

/// Relation label strings per merged node (None at `tau`): the original
/// dependency label for distance-1 nodes, `min(n, max_bucket):con`
/// otherwise, `disc:con` for unreachable nodes.
pub fn relation_labels(
    p: &ParseSample,
    sg: &SyntaxGraph,
    dist: &[Option<u32>],
    max_bucket: u32,
) -> Vec<Option<String>> {
    let (a, b) = p.aspect;
    let n_a = b - a;
    // merged index -> original token index (context nodes only)
    let unmap = |mi: usize| -> usize {
        if mi < a {
            mi
        } else {
            mi + (n_a - 1)
        }
    };
    let mut out = vec![None; sg.n];
    for mi in 0..sg.n {
        if mi == sg.tau {
            continue;
        }
        let label = match dist[mi] {
            None => "disc:con".to_string(),
            Some(1) => {
                // The dependency label of the tree edge linking this node to
                // the aspect; with several adjacent aspect tokens, the edge
                // to the lowest-index one.
                let i = unmap(mi);
                let mut label = None;
                for k in a..b {
                    if p.heads[i] == Some(k) {
                        label = Some(p.deprels[i].clone());
                        break;
                    }
                    if p.heads[k] == Some(i) {
                        label = Some(p.deprels[k].clone());
                        break;
                    }
                }
                label.unwrap_or_else(|| "1:con".to_string())
            }
            Some(d) => format!("{}:con", d.min(max_bucket)),
        };
        out[mi] = Some(label);
    }
    out
}

/// Builds the relation graph for a sample against a fixed vocabulary.
/// Relations absent from the vocabulary fall back to the cap bucket.
pub fn build_relation_graph(
    p: &ParseSample,
    sg: &SyntaxGraph,
    dist: &[Option<u32>],
    vocab: &RelationVocab,
    max_bucket: u32,
) -> Result<RelationGraph> {
    let labels = relation_labels(p, sg, dist, max_bucket);
    let mut rel = vec![None; sg.n];
    let mut rel_rv = vec![None; sg.n];
    for (i, label) in labels.iter().enumerate() {
        if let Some(label) = label {
            rel[i] = Some(vocab.lookup_or_bucket(label, max_bucket)?);
            rel_rv[i] = Some(vocab.lookup_or_bucket(&format!("rv:{label}"), max_bucket)?);
        }
    }
    Ok(RelationGraph {
        n: sg.n,
        tau: sg.tau,
        rel,
        rel_rv,
        vocab: vocab.clone(),
    })
}

/// Stitches the two graphs. They must share the node set.
pub fn assemble_lgig(sg: SyntaxGraph, rg: RelationGraph, mode: InteractiveMode) -> Result<Lgig> {
    if sg.n != rg.n || sg.tau != rg.tau {
        return Err(Error::contract(format!(
            "graphs misaligned: syntax (n={}, tau={}) vs relation (n={}, tau={})",
            sg.n, sg.tau, rg.n, rg.tau
        )));
    }
    Ok(Lgig {
        syntax: sg,
        relation: rg,
        mode,
    })
}

/// Full pipeline for one sample against a fixed vocabulary.
pub fn build_lgig(
    p: &ParseSample,
    vocab: &RelationVocab,
    max_bucket: u32,
    mode: InteractiveMode,
) -> Result<Lgig> {
    p.validate()?;
    let sg = syntax_graph(p)?;
    let dist = aspect_distances(&sg);
    let rg = build_relation_graph(p, &sg, &dist, vocab, max_bucket)?;
    assemble_lgig(sg, rg, mode)
}

/// Collects every relation label (plus reversed forms) occurring in a
/// training split and builds the vocabulary.
pub fn vocab_from_samples(samples: &[ParseSample], max_bucket: u32) -> Result<RelationVocab> {
    let mut seen = Vec::new();
    for p in samples {
        p.validate()?;
        let sg = syntax_graph(p)?;
        let dist = aspect_distances(&sg);
        for label in relation_labels(p, &sg, &dist, max_bucket)
            .into_iter()
            .flatten()
        {
            seen.push(label);
        }
    }
    Ok(RelationVocab::build(
        seen.iter().map(String::as_str),
        max_bucket,
    ))
}
