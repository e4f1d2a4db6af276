//! Interaction (TSV) and item (JSON lines) files.

use std::fmt::Write as _;
use std::path::Path;

use glta_core::data::{graph_from_pairs, Catalog};
use glta_core::graph::InteractionGraph;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct ItemRecord {
    item_id: String,
    #[serde(default)]
    description: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: InteractionGraph,
    pub catalog: Catalog,
    /// Repeated (user, item) lines collapsed into one edge.
    pub duplicates: usize,
}

/// Reads the items file into a fresh catalog. An empty file is an error.
pub fn parse_items(text: &str, path: &Path) -> Result<Catalog> {
    let mut catalog = Catalog::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let rec: ItemRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        catalog
            .add_item(&rec.item_id, rec.description)
            .map_err(|e| err(e.to_string()))?;
    }
    if catalog.num_items() == 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: String::from("items file lists no items"),
        });
    }
    Ok(catalog)
}

/// Reads `user_id<TAB>item_id[<TAB>timestamp]` lines. A first line starting
/// with `user_id` is a header. A line holding only a user id declares a user
/// without interactions. With timestamps, each user's items are ordered by
/// time; otherwise file order is taken as chronological.
pub fn parse_interactions(
    text: &str,
    path: &Path,
    catalog: &mut Catalog,
) -> Result<(InteractionGraph, usize)> {
    let mut rows: Vec<(usize, usize, Option<i64>)> = Vec::new();
    let mut timed: Option<bool> = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (n == 0 && line.starts_with("user_id")) {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields[0].is_empty() {
            return Err(err(String::from("empty user id")));
        }
        let user = catalog.intern_user(fields[0]);
        match fields.len() {
            1 => continue,
            2 | 3 => {}
            k => return Err(err(format!("expected 2 or 3 tab-separated fields, found {k}"))),
        }
        let item = catalog
            .item_index(fields[1])
            .ok_or_else(|| Error::UnknownItem {
                line: n + 1,
                item: fields[1].to_string(),
            })?;
        let ts = match fields.get(2) {
            Some(t) => Some(
                t.parse::<i64>()
                    .map_err(|_| err(format!("bad timestamp {t:?}")))?,
            ),
            None => None,
        };
        if *timed.get_or_insert(ts.is_some()) != ts.is_some() {
            return Err(err(String::from("timestamps must be given on all lines or none")));
        }
        rows.push((user, item, ts));
    }
    if timed == Some(true) {
        rows.sort_by_key(|r| r.2);
    }
    let (graph, dups) = graph_from_pairs(catalog, rows.into_iter().map(|(u, i, _)| (u, i)))?;
    Ok((graph, dups))
}

pub fn load_dataset(interactions: &Path, items: &Path) -> Result<Dataset> {
    let item_text = std::fs::read_to_string(items).map_err(io_err(items))?;
    let mut catalog = parse_items(&item_text, items)?;
    let text = std::fs::read_to_string(interactions).map_err(io_err(interactions))?;
    let (graph, duplicates) = parse_interactions(&text, interactions, &mut catalog)?;
    if duplicates > 0 {
        log::info!("collapsed {duplicates} duplicate interactions");
    }
    Ok(Dataset {
        graph,
        catalog,
        duplicates,
    })
}

/// Interactions file text: users in index order, each with its items in
/// chronological order.
pub fn interactions_text(graph: &InteractionGraph, catalog: &Catalog) -> String {
    let mut out = String::new();
    for u in 0..graph.num_users() {
        let items = graph.user_items(u);
        if items.is_empty() {
            let _ = writeln!(out, "{}", catalog.user_id(u));
        }
        for &i in items {
            let _ = writeln!(out, "{}\t{}", catalog.user_id(u), catalog.item_id(i));
        }
    }
    out
}

pub fn items_text(catalog: &Catalog) -> Result<String> {
    let mut out = String::new();
    for i in 0..catalog.num_items() {
        let rec = ItemRecord {
            item_id: catalog.item_id(i).to_string(),
            description: catalog.description(i).map(str::to_string),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(
    graph: &InteractionGraph,
    catalog: &Catalog,
    interactions: &Path,
    items: &Path,
) -> Result<()> {
    std::fs::write(items, items_text(catalog)?).map_err(io_err(items))?;
    std::fs::write(interactions, interactions_text(graph, catalog)).map_err(io_err(interactions))
}
