use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Edge, GameKind, PayoffMatrix, PolymatrixGame};
use crate::error::{Error, Result};

/// On-disk form of a game. Matrices are nested row lists, rows indexed by
/// the `from` agent's actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameFile {
    pub num_agents: usize,
    pub action_counts: Vec<usize>,
    pub kind: GameKind,
    pub edges: Vec<EdgeRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub from: usize,
    pub to: usize,
    pub matrix: Vec<Vec<f64>>,
}

impl TryFrom<GameFile> for PolymatrixGame {
    type Error = Error;

    fn try_from(file: GameFile) -> Result<Self> {
        if file.num_agents != file.action_counts.len() {
            return Err(Error::input(format!(
                "num_agents = {} but {} action counts given",
                file.num_agents,
                file.action_counts.len()
            )));
        }
        let edges = file
            .edges
            .into_iter()
            .map(|e| {
                Ok(Edge {
                    from: e.from,
                    to: e.to,
                    matrix: PayoffMatrix::from_rows(e.matrix)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        PolymatrixGame::new(file.action_counts, file.kind, edges)
    }
}

impl From<PolymatrixGame> for GameFile {
    fn from(game: PolymatrixGame) -> Self {
        GameFile {
            num_agents: game.num_agents(),
            action_counts: game.action_counts().to_vec(),
            kind: game.kind(),
            edges: game
                .edges()
                .map(|(from, to, m)| EdgeRecord {
                    from,
                    to,
                    matrix: m.to_rows(),
                })
                .collect(),
        }
    }
}

impl PolymatrixGame {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("game serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("game file: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
