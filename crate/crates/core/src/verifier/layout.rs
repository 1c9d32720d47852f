use crate::graph_input::InputGraph;
use crate::tape::{Mat, Segment};

#[derive(Debug, Clone)]
pub struct GraphSlot {
    pub node_start: usize,
    pub n_nodes: usize,
    pub row_start: usize,
    pub rows: usize,
    pub evidence_start: usize,
    pub evidence_len: usize,
}

/// Row layout of a batch of graphs packed into one `rows × d` matrix.
/// Evidence rows are enumerated node by node, graph by graph.
#[derive(Debug, Clone)]
pub struct BatchLayout {
    pub token_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<usize>,
    pub node_rows: Vec<Segment>,
    pub cls_rows: Vec<usize>,
    pub evidence_rows: Vec<usize>,
    /// Offset of each node's first evidence row within `evidence_rows`.
    pub node_evidence_start: Vec<usize>,
    pub graphs: Vec<GraphSlot>,
    pub adjacency: Vec<Mat>,
}

impl BatchLayout {
    pub fn new(graphs: &[&InputGraph]) -> Self {
        let mut l = BatchLayout {
            token_ids: Vec::new(),
            positions: Vec::new(),
            segments: Vec::new(),
            node_rows: Vec::new(),
            cls_rows: Vec::new(),
            evidence_rows: Vec::new(),
            node_evidence_start: Vec::new(),
            graphs: Vec::with_capacity(graphs.len()),
            adjacency: graphs.iter().map(|g| g.adjacency.clone()).collect(),
        };
        for g in graphs {
            let slot = GraphSlot {
                node_start: l.node_rows.len(),
                n_nodes: g.num_nodes(),
                row_start: l.token_ids.len(),
                rows: 0,
                evidence_start: l.evidence_rows.len(),
                evidence_len: g.total_evidence(),
            };
            for (node, span) in g.nodes.iter().zip(&g.evidence_spans) {
                let start = l.token_ids.len();
                l.node_rows.push(Segment { start, len: node.len() });
                l.cls_rows.push(start);
                l.node_evidence_start.push(l.evidence_rows.len());
                l.evidence_rows.extend(span.clone().map(|p| start + p));
                for (p, &id) in node.iter().enumerate() {
                    l.token_ids.push(id as usize);
                    l.positions.push(p);
                    l.segments.push(g.segment(p));
                }
            }
            l.graphs.push(GraphSlot { rows: l.token_ids.len() - slot.row_start, ..slot });
        }
        l
    }

    pub fn total_rows(&self) -> usize {
        self.token_ids.len()
    }

    pub fn total_nodes(&self) -> usize {
        self.node_rows.len()
    }

    pub fn total_evidence(&self) -> usize {
        self.evidence_rows.len()
    }
}
