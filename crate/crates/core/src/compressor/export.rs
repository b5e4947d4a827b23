use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pipeline::NodeState;
use super::session::{CompressionSession, Turn};
use crate::container;
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::segmenter::ScoringConfig;
use crate::semtree::{NodeInfo, SemanticTree};

pub const MAGIC: &[u8; 4] = b"ADMS";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeMeta {
    nodes: Vec<NodeInfo>,
    root: Option<usize>,
    seal_start: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionMeta {
    scoring: ScoringConfig,
    d_model: usize,
    n_layers: usize,
    tokens: Vec<usize>,
    turns: Vec<Turn>,
    cursor: usize,
    tree: TreeMeta,
}

impl CompressionSession {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let nodes = self.tree.nodes();
        let (d, layers) = nodes
            .first()
            .map(|n| (n.payload.hidden.len(), n.payload.kv.len()))
            .unwrap_or((0, 0));
        let meta = SessionMeta {
            scoring: self.config.clone(),
            d_model: d,
            n_layers: layers,
            tokens: self.tokens.clone(),
            turns: self.turns.clone(),
            cursor: self.cursor,
            tree: TreeMeta {
                nodes: self.tree.info(),
                root: self.tree.root(),
                seal_start: self.tree.seal_start(),
            },
        };
        let n = nodes.len();
        let hidden = Tensor::new(
            vec![n, d],
            nodes.iter().flat_map(|x| x.payload.hidden.iter().copied()).collect(),
        )?;
        let stack = |value: bool| {
            let mut data = Vec::with_capacity(layers * n * d);
            for l in 0..layers {
                for x in nodes {
                    let (k, v) = &x.payload.kv[l];
                    data.extend_from_slice(if value { v } else { k });
                }
            }
            Tensor::new(vec![layers, n, d], data)
        };
        let (keys, values) = (stack(false)?, stack(true)?);
        let mut buf = Vec::new();
        container::write(
            &mut buf,
            MAGIC,
            &serde_json::to_value(&meta)?,
            &[
                ("nodes/hidden".into(), &hidden),
                ("nodes/keys".into(), &keys),
                ("nodes/values".into(), &values),
            ],
        )?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = container::read(bytes, MAGIC)?;
        let meta: SessionMeta =
            serde_json::from_value(meta).map_err(|e| Error::format(12, format!("session metadata: {e}")))?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format(12, format!("missing tensor {name}")))
        };
        let (hidden, keys, values) = (find("nodes/hidden")?, find("nodes/keys")?, find("nodes/values")?);
        let (n, d, layers) = (meta.tree.nodes.len(), meta.d_model, meta.n_layers);
        if hidden.shape() != [n, d] || keys.shape() != [layers, n, d] || values.shape() != [layers, n, d] {
            return Err(Error::format(12, "node tensors disagree with the tree"));
        }
        let payloads = (0..n)
            .map(|i| NodeState {
                hidden: hidden.data()[i * d..(i + 1) * d].to_vec(),
                kv: (0..layers)
                    .map(|l| {
                        let at = (l * n + i) * d;
                        (keys.data()[at..at + d].to_vec(), values.data()[at..at + d].to_vec())
                    })
                    .collect(),
            })
            .collect();
        let tree = SemanticTree::from_parts(&meta.tree.nodes, payloads, meta.tree.root, meta.tree.seal_start)
            .map_err(|e| Error::format(12, e.to_string()))?;
        meta.scoring.validate()?;
        let session = CompressionSession {
            config: meta.scoring,
            tokens: meta.tokens,
            turns: meta.turns,
            tree,
            cursor: meta.cursor,
        };
        if session.tree.leaf_count() != session.cursor || session.cursor > session.planned_leaves() {
            return Err(Error::format(12, "cursor disagrees with the tree"));
        }
        Ok(session)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
