//! Synthetic corpora with known defects, for exercising the pipeline.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::Stage;

/// How many files of each kind to plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantSpec {
    pub clean: usize,
    pub exact_dups: usize,
    pub whitespace_dups: usize,
    pub too_short: usize,
    pub too_long: usize,
    pub syntax_errors: usize,
    pub banners: usize,
    pub contaminated: usize,
}

impl PlantSpec {
    pub fn total(&self) -> usize {
        self.clean
            + self.exact_dups
            + self.whitespace_dups
            + self.too_short
            + self.too_long
            + self.syntax_errors
            + self.banners
            + self.contaminated
    }
}

/// A planted corpus on disk and the stage each file should fall at.
#[derive(Debug, Clone)]
pub struct Plant {
    pub corpus_dir: PathBuf,
    pub golden_dir: PathBuf,
    /// `(id, stage)`, `None` for files that should survive, sorted by id.
    pub expected: Vec<(String, Option<Stage>)>,
}

impl Plant {
    pub fn expected_retained(&self) -> Vec<&str> {
        self.expected
            .iter()
            .filter(|(_, s)| s.is_none())
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn expected_rejected_at(&self, stage: Stage) -> Vec<&str> {
        self.expected
            .iter()
            .filter(|(_, s)| *s == Some(stage))
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// A small pipelined datapath; `stages` registers long.
pub fn clean_module(i: usize, stages: usize) -> String {
    let mut s = format!(
        "module blk_{i} (\n  input wire clk,\n  input wire rst,\n  input wire [7:0] in_{i},\n  output reg [7:0] out_{i}\n);\n"
    );
    for k in 0..stages {
        s.push_str(&format!("  reg [7:0] s{i}_{k};\n"));
    }
    s.push_str("  always @(posedge clk) begin\n    if (rst) begin\n");
    for k in 0..stages {
        s.push_str(&format!("      s{i}_{k} <= 8'd0;\n"));
    }
    s.push_str("    end else begin\n");
    s.push_str(&format!("      s{i}_0 <= in_{i} + 8'd{};\n", (i * 13 + 1) % 256));
    for k in 1..stages {
        s.push_str(&format!("      s{i}_{k} <= s{i}_{} ^ 8'd{};\n", k - 1, (k * 7 + i) % 256));
    }
    s.push_str("    end\n  end\n");
    s.push_str(&format!("  always @(*) out_{i} = s{i}_{};\n", stages - 1));
    s.push_str("endmodule\n");
    s
}

/// A reference solution with a wide, distinctive vocabulary.
pub fn reference_module(j: usize) -> String {
    let mut s = format!(
        "module ref_{j} (\n  input wire clock,\n  input wire reset_n,\n  input wire [15:0] data_in_{j},\n  output wire [15:0] data_out_{j}\n);\n"
    );
    for k in 0..12 {
        s.push_str(&format!("  reg [15:0] acc_{j}_{k};\n"));
    }
    s.push_str("  always @(posedge clock or negedge reset_n) begin\n    if (!reset_n) begin\n");
    for k in 0..12 {
        s.push_str(&format!("      acc_{j}_{k} <= 16'h0;\n"));
    }
    s.push_str("    end else begin\n");
    s.push_str(&format!("      acc_{j}_0 <= data_in_{j};\n"));
    for k in 1..12 {
        s.push_str(&format!("      acc_{j}_{k} <= acc_{j}_{} + 16'h{:x};\n", k - 1, 3 * k + j));
    }
    s.push_str("    end\n  end\n");
    s.push_str(&format!("  assign data_out_{j} = acc_{j}_11;\n"));
    s.push_str("endmodule\n");
    s
}

/// Appends comment lines until `text` has `lines` lines.
fn pad_to(mut text: String, lines: usize) -> String {
    let mut n = text.lines().count();
    while n < lines {
        text.push_str("// padding\n");
        n += 1;
    }
    text
}

fn write(dir: &Path, name: &str, content: &str) -> io::Result<()> {
    fs::write(dir.join(name), content)
}

/// Writes the corpus under `root/corpus` and two reference solutions under
/// `root/golden`.
pub fn plant(root: &Path, spec: &PlantSpec) -> io::Result<Plant> {
    let corpus = root.join("corpus");
    let golden = root.join("golden");
    fs::create_dir_all(&corpus)?;
    fs::create_dir_all(&golden)?;
    let mut expected = Vec::new();
    let mut add = |name: String, content: String, stage: Option<Stage>| -> io::Result<()> {
        write(&corpus, &name, &content)?;
        expected.push((name, stage));
        Ok(())
    };

    let golden_count = spec.contaminated.max(2);
    for j in 0..golden_count {
        write(&golden, &format!("gold_{j:02}.v"), &reference_module(j))?;
    }

    let clean: Vec<String> = (0..spec.clean).map(|i| clean_module(i, 8 + i % 5)).collect();
    for (i, c) in clean.iter().enumerate() {
        add(format!("clean_{i:02}.v"), c.clone(), None)?;
    }
    for k in 0..spec.exact_dups {
        add(format!("dup_exact_{k:02}.v"), clean[k % clean.len()].clone(), Some(Stage::Dedup))?;
    }
    for k in 0..spec.whitespace_dups {
        let base = &clean[(spec.exact_dups + k) % clean.len()];
        let spaced: String = base.lines().map(|l| format!("{l}   \n")).collect();
        add(format!("dup_ws_{k:02}.v"), spaced, Some(Stage::Dedup))?;
    }
    for k in 0..spec.banners {
        let body = clean_module(100 + k, 10);
        add(
            format!("gen_{k:02}.v"),
            format!("// Generated by netgen 4.2. Do not edit.\n{body}"),
            Some(Stage::MachineGenerated),
        )?;
    }
    for k in 0..spec.too_short {
        // One file sits a line below the bound; the rest are tiny.
        let m = if k == 1 {
            pad_to(clean_module(200 + k, 5), 29)
        } else {
            clean_module(200 + k, 1)
        };
        add(format!("short_{k:02}.v"), m, Some(Stage::LineBounds))?;
    }
    for k in 0..spec.too_long {
        let m = pad_to(clean_module(300 + k, 662), 2001);
        add(format!("long_{k:02}.v"), m, Some(Stage::LineBounds))?;
    }
    for k in 0..spec.syntax_errors {
        let m = clean_module(400 + k, 10);
        let broken = if k % 2 == 0 {
            m.replace("endmodule\n", "")
        } else {
            m.replacen("8'd0;", "8'd0", 1)
        };
        add(format!("syntax_{k:02}.v"), broken, Some(Stage::Syntax))?;
    }
    for k in 0..spec.contaminated {
        let near = reference_module(k).replacen(&format!("module ref_{k} "), &format!("module ref_{k}_copy "), 1);
        add(format!("taken_{k:02}.v"), near, Some(Stage::Contamination))?;
    }
    expected.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(Plant {
        corpus_dir: corpus,
        golden_dir: golden,
        expected,
    })
}
