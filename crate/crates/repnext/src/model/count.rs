//! Parameter and MAC accounting. Every row carries two independently
//! computed values per quantity: the closed-form result and a brute-force
//! measurement (stored-value enumeration for parameters, an instrumented
//! multiply-counting forward for MACs). The contract is their equality,
//! which `verify` and the acceptance suite assert.

use serde::Serialize;

use super::Model;
use crate::error::Result;
use crate::tensor::{Element, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountRow {
    pub unit: String,
    pub params_analytic: u64,
    pub params_enumerated: u64,
    pub macs_analytic: u64,
    pub macs_counted: u64,
}

impl CountRow {
    pub fn consistent(&self) -> bool {
        self.params_analytic == self.params_enumerated && self.macs_analytic == self.macs_counted
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountReport {
    pub form: String,
    pub input: [usize; 4],
    pub rows: Vec<CountRow>,
    pub total: CountRow,
}

impl CountReport {
    pub fn consistent(&self) -> bool {
        self.rows.iter().all(CountRow::consistent) && self.total.consistent()
    }

    /// Fixed-width table for terminal output.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "form={} input={}x{}x{}x{}\n",
            self.form, self.input[0], self.input[1], self.input[2], self.input[3]
        ));
        let width = self
            .rows
            .iter()
            .map(|r| r.unit.len())
            .chain([self.total.unit.len(), 4])
            .max()
            .unwrap();
        out.push_str(&format!(
            "{:width$}  {:>12} {:>12} {:>14} {:>14}\n",
            "unit", "params", "params_enum", "macs", "macs_counted"
        ));
        for row in self.rows.iter().chain([&self.total]) {
            out.push_str(&format!(
                "{:width$}  {:>12} {:>12} {:>14} {:>14}\n",
                row.unit,
                row.params_analytic,
                row.params_enumerated,
                row.macs_analytic,
                row.macs_counted
            ));
        }
        out
    }
}

fn enumerated<T: Element>(visit: impl FnOnce(crate::blocks::ParamFn<'_, T>) -> Result<()>) -> u64 {
    let mut total: u64 = 0;
    visit(&mut |_name, values, meta| {
        if !meta.buffer {
            total += values.len() as u64;
        }
        Ok(())
    })
    .expect("enumeration visitor cannot fail");
    total
}

/// Per-unit and total accounting at `in_shape`. Runs one instrumented
/// forward on a zeros input (counts depend only on shapes).
pub fn count_report<T: Element>(model: &Model<T>, in_shape: Shape) -> Result<CountReport> {
    model.check_input(in_shape)?;
    let mut rows: Vec<CountRow> = Vec::new();
    let mut t: Tensor<T> = Tensor::zeros(in_shape);

    {
        let mut stem = model.stem.clone();
        let analytic = model.stem.macs(t.shape())?;
        let (out, counted) = model.stem.forward_counting(&t)?;
        rows.push(CountRow {
            unit: "stem".to_string(),
            params_analytic: model.stem.param_counts().total(),
            params_enumerated: enumerated(|f| stem.visit_params("stem", f)),
            macs_analytic: analytic,
            macs_counted: counted,
        });
        t = out;
    }

    for i in 0..4 {
        for (j, block) in model.stages[i].iter().enumerate() {
            let mut clone = block.clone();
            let analytic = block.macs(t.shape())?;
            let (out, counted) = block.forward_counting(&t)?;
            rows.push(CountRow {
                unit: format!("stages.{i}.blocks.{j}"),
                params_analytic: block.param_counts().total(),
                params_enumerated: enumerated(|f| clone.visit_params("b", f)),
                macs_analytic: analytic,
                macs_counted: counted,
            });
            t = out;
        }
        if i < 3 {
            let layer = &model.downsamples[i];
            let mut clone = layer.clone();
            let analytic = layer.macs(t.shape())?;
            let (out, counted) = layer.forward_counting(&t)?;
            rows.push(CountRow {
                unit: format!("downsamples.{i}"),
                params_analytic: layer.param_counts().total(),
                params_enumerated: enumerated(|f| clone.visit_params("d", f)),
                macs_analytic: analytic,
                macs_counted: counted,
            });
            t = out;
        }
    }

    {
        let pooled = crate::ops::global_avg_pool(&t);
        let analytic = model.head.spec.macs(pooled.shape())?;
        let (_, counted) = crate::ops::conv2d_counting(&model.head, &pooled)?;
        let (w, b) = model.head.param_counts();
        let stored = model.head.weight.len() as u64
            + model.head.bias.as_ref().map_or(0, |bias| bias.len() as u64);
        rows.push(CountRow {
            unit: "head".to_string(),
            params_analytic: w + b,
            params_enumerated: stored,
            macs_analytic: analytic,
            macs_counted: counted,
        });
    }

    let total = CountRow {
        unit: "total".to_string(),
        params_analytic: rows.iter().map(|r| r.params_analytic).sum(),
        params_enumerated: rows.iter().map(|r| r.params_enumerated).sum(),
        macs_analytic: rows.iter().map(|r| r.macs_analytic).sum(),
        macs_counted: rows.iter().map(|r| r.macs_counted).sum(),
    };
    Ok(CountReport {
        form: model.form().as_str().to_string(),
        input: [in_shape.n, in_shape.c, in_shape.h, in_shape.w],
        rows,
        total,
    })
}

/// Analytic and enumerated parameter totals; the contract is equality.
pub fn count_params<T: Element>(model: &Model<T>) -> (u64, u64) {
    (model.param_counts().total(), model.enumerate_params())
}

/// Analytic and instrumented MAC totals at a shape; the contract is
/// equality.
pub fn count_macs<T: Element>(model: &Model<T>, in_shape: Shape) -> Result<(u64, u64)> {
    let analytic = model.macs(in_shape)?;
    let x: Tensor<T> = Tensor::zeros(in_shape);
    let (_, counted) = model.forward_counting(&x)?;
    Ok((analytic, counted))
}
