//! Readers and writers for the on-disk formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fcmfwi_core::dynamics::{Traces, WaveHistory};
use fcmfwi_core::material::{Cell, IndicatorField, MaterialGrid};

use crate::error::{AppError, AppResult};

fn create(path: &Path) -> AppResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| AppError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> AppError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AppError::io(path, io),
        other => AppError::format(path, format!("{other:?}")),
    }
}

/// File name of the trace set of source `s`.
pub fn trace_file(dir: &Path, s: usize) -> PathBuf {
    dir.join(format!("traces_s{s:03}.csv"))
}

/// Header `t,r0,r1,...`, one row per time step.
pub fn write_traces(path: &Path, traces: &Traces) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["t".to_string()];
    header.extend((0..traces.n_receivers()).map(|r| format!("r{r}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..traces.n_samples() {
        let mut row = vec![format_f64(i as f64 * traces.dt)];
        row.extend((0..traces.n_receivers()).map(|r| format_f64(traces.get(r, i))));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn read_traces(path: &Path) -> AppResult<Traces> {
    let mut rd = csv::Reader::from_reader(File::open(path).map_err(|e| AppError::io(path, e))?);
    let header = rd.headers().map_err(|e| csv_err(path, e))?.clone();
    let n_r = header.len().saturating_sub(1);
    if header.get(0) != Some("t") || n_r == 0 || (0..n_r).any(|r| header.get(r + 1) != Some(&format!("r{r}")[..])) {
        return Err(AppError::format(path, "expected header t,r0,r1,..."));
    }
    let mut t = Vec::new();
    let mut rows = vec![Vec::new(); n_r];
    for rec in rd.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let parse = |k: usize| -> AppResult<f64> {
            rec[k].trim().parse().map_err(|_| AppError::format(path, format!("bad number `{}`", &rec[k])))
        };
        t.push(parse(0)?);
        for (r, row) in rows.iter_mut().enumerate() {
            row.push(parse(r + 1)?);
        }
    }
    if t.len() < 2 {
        return Err(AppError::format(path, "need at least two time samples"));
    }
    let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    let uniform = t.iter().enumerate().all(|(i, &ti)| (ti - i as f64 * dt).abs() <= 1e-9 * dt * t.len() as f64);
    if t[0].abs() > 1e-12 * dt || !(dt > 0.0) || !uniform {
        return Err(AppError::format(path, "time column must be uniform and start at 0"));
    }
    Traces::from_rows(rows, dt).map_err(|e| AppError::format(path, e.to_string()))
}

pub fn write_trace_set(dir: &Path, traces: &[Traces]) -> AppResult<Vec<PathBuf>> {
    traces
        .iter()
        .enumerate()
        .map(|(s, t)| {
            let p = trace_file(dir, s);
            write_traces(&p, t)?;
            Ok(p)
        })
        .collect()
}

/// Reads `traces_s000.csv`, ... for `n_sources` sources.
pub fn read_trace_set(dir: &Path, n_sources: usize) -> AppResult<Vec<Traces>> {
    (0..n_sources)
        .map(|s| {
            let p = trace_file(dir, s);
            if !p.exists() {
                return Err(AppError::Core(fcmfwi_core::Error::InvalidState(format!(
                    "reference trace file {} is missing",
                    p.display()
                ))));
            }
            read_traces(&p)
        })
        .collect()
}

/// Shortest representation that parses back to the same value.
fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Plain-text γ grid: `level0 nx ny hvx hvy`, `ny` rows of `nx` values
/// (refined cells carry their sub-voxel mean), then one `sub i j n_vs` block
/// per refined cell with `n_vs` rows of `n_vs` values.
pub fn write_gamma_grid(path: &Path, grid: &MaterialGrid) -> AppResult<()> {
    let mut w = create(path)?;
    let io = |e| AppError::io(path, e);
    let (nx, ny) = grid.level0_dims();
    let (hx, hy) = grid.level0_size();
    let n = grid.subdivision();
    let g = grid.gammas();
    writeln!(w, "level0 {nx} {ny} {} {}", format_f64(hx), format_f64(hy)).map_err(io)?;
    let cell_value = |c: &Cell| match *c {
        Cell::Coarse(id) => g[id],
        Cell::Refined(first) => g[first..first + n * n].iter().sum::<f64>() / (n * n) as f64,
    };
    for j in 0..ny {
        let row: Vec<String> = (0..nx).map(|i| format_f64(cell_value(&grid.cells()[i + nx * j]))).collect();
        writeln!(w, "{}", row.join(" ")).map_err(io)?;
    }
    for (c, cell) in grid.cells().iter().enumerate() {
        if let Cell::Refined(first) = *cell {
            writeln!(w, "sub {} {} {n}", c % nx, c / nx).map_err(io)?;
            for b in 0..n {
                let row: Vec<String> = (0..n).map(|a| format_f64(g[first + a + n * b])).collect();
                writeln!(w, "{}", row.join(" ")).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Reads a grid file written by [`write_gamma_grid`]; the voxel count per
/// knot span comes from the configuration.
pub fn read_gamma_grid(path: &Path, n_v: usize, bounds: (f64, f64)) -> AppResult<MaterialGrid> {
    let file = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut lines = Vec::new();
    for l in BufReader::new(file).lines() {
        let l = l.map_err(|e| AppError::io(path, e))?;
        if !l.trim().is_empty() {
            lines.push(l);
        }
    }
    let bad = |m: String| AppError::format(path, m);
    let head: Vec<&str> = lines.first().ok_or_else(|| bad("empty grid file".into()))?.split_whitespace().collect();
    if head.len() != 5 || head[0] != "level0" {
        return Err(bad("expected header `level0 nx ny hvx hvy`".into()));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer `{s}`")));
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
    let (nx, ny, hx, hy) = (int(head[1])?, int(head[2])?, num(head[3])?, num(head[4])?);
    if n_v == 0 || nx % n_v != 0 || ny % n_v != 0 || nx == 0 || ny == 0 {
        return Err(bad(format!("{nx} x {ny} voxels do not fit {n_v} voxels per span")));
    }
    let row_values = |k: usize, n: usize| -> AppResult<Vec<f64>> {
        let line = lines.get(k).ok_or_else(|| bad("file ends early".into()))?;
        let v = line.split_whitespace().map(num).collect::<AppResult<Vec<f64>>>()?;
        if v.len() != n {
            return Err(bad(format!("line {}: expected {n} values, got {}", k + 1, v.len())));
        }
        Ok(v)
    };
    let mut level0 = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        level0.extend(row_values(1 + j, nx)?);
    }
    let mut k = 1 + ny;
    let mut subs = Vec::new();
    let mut n_vs = None;
    while k < lines.len() {
        let f: Vec<&str> = lines[k].split_whitespace().collect();
        if f.len() != 4 || f[0] != "sub" {
            return Err(bad(format!("line {}: expected `sub i j n_vs`", k + 1)));
        }
        let (i, j, n) = (int(f[1])?, int(f[2])?, int(f[3])?);
        if i >= nx || j >= ny || n < 2 || n_vs.is_some_and(|m| m != n) {
            return Err(bad(format!("line {}: invalid refined cell", k + 1)));
        }
        n_vs = Some(n);
        let mut vals = Vec::with_capacity(n * n);
        for b in 0..n {
            vals.extend(row_values(k + 1 + b, n)?);
        }
        subs.push((i + nx * j, vals));
        k += 1 + n;
    }
    let spans = (nx / n_v, ny / n_v);
    let mut grid = MaterialGrid::new(spans, (nx as f64 * hx, ny as f64 * hy), n_v, bounds)?;
    grid.set_gammas(&level0)?;
    if let Some(n) = n_vs {
        let mut marked = vec![false; nx * ny];
        for (c, _) in &subs {
            marked[*c] = true;
        }
        grid = grid.refine_cells(&marked, n)?;
        let mut g = grid.gammas().to_vec();
        for (c, vals) in &subs {
            let Cell::Refined(first) = grid.cells()[*c] else { unreachable!() };
            g[first..first + n * n].copy_from_slice(vals);
        }
        grid.set_gammas(&g)?;
    }
    Ok(grid)
}

/// Rows of `x_mid,y_mid,value`.
pub fn write_voxel_csv(path: &Path, grid: &MaterialGrid, ids: &[usize], values: &[f64], name: &str) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["x_mid", "y_mid", name]).map_err(|e| csv_err(path, e))?;
    for (&id, &v) in ids.iter().zip(values) {
        let m = grid.voxel_box(id).center();
        w.write_record([format_f64(m.x), format_f64(m.y), format_f64(v)]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_gamma_csv(path: &Path, grid: &MaterialGrid) -> AppResult<()> {
    let ids: Vec<usize> = (0..grid.len()).collect();
    write_voxel_csv(path, grid, &ids, grid.gammas(), "gamma")
}

/// Binary 8-bit graymap of γ on the finest active resolution, top row
/// first; γ_max is white and γ_min black.
pub fn write_gamma_pgm(path: &Path, grid: &MaterialGrid) -> AppResult<()> {
    let (w, h, pixels) = gamma_raster(grid);
    let mut f = create(path)?;
    let io = |e| AppError::io(path, e);
    write!(f, "P5\n{w} {h}\n255\n").map_err(io)?;
    f.write_all(&pixels).map_err(io)?;
    f.flush().map_err(io)
}

/// Width, height and row-major pixels (top row first).
pub fn gamma_raster(grid: &MaterialGrid) -> (usize, usize, Vec<u8>) {
    let (nx, ny) = grid.level0_dims();
    let n = grid.subdivision();
    let (w, h) = (nx * n, ny * n);
    let (lo, hi) = grid.bounds();
    let g = grid.gammas();
    let mut pixels = vec![0u8; w * h];
    for (c, cell) in grid.cells().iter().enumerate() {
        let (ci, cj) = (c % nx, c / nx);
        for b in 0..n {
            for a in 0..n {
                let v = match *cell {
                    Cell::Coarse(id) => g[id],
                    Cell::Refined(first) => g[first + a + n * b],
                };
                let shade = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 1.0 };
                let (px, py) = (ci * n + a, cj * n + b);
                pixels[px + w * (h - 1 - py)] = (255.0 * shade).round() as u8;
            }
        }
    }
    (w, h, pixels)
}

pub fn write_indicator_csv(path: &Path, grid: &MaterialGrid, ind: &IndicatorField, marked: &[bool]) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["i", "j", "x_mid", "y_mid", "eta", "marked"]).map_err(|e| csv_err(path, e))?;
    let (hx, hy) = grid.level0_size();
    for j in 0..ind.ny {
        for i in 0..ind.nx {
            let k = i + ind.nx * j;
            w.write_record([
                i.to_string(),
                j.to_string(),
                format_f64((i as f64 + 0.5) * hx),
                format_f64((j as f64 + 0.5) * hy),
                format_f64(ind.eta[k]),
                u8::from(marked[k]).to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// One optimizer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JournalRow {
    pub iter: usize,
    pub chi: f64,
    pub proj_grad_norm: f64,
    pub step_len: f64,
    pub n_evals: usize,
}

pub fn write_journal(path: &Path, rows: &[JournalRow]) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["iter", "chi", "proj_grad_norm", "step_len", "n_evals"]).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            format_f64(r.chi),
            format_f64(r.proj_grad_norm),
            format_f64(r.step_len),
            r.n_evals.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Little-endian f64, one snapshot per row.
pub fn write_history(path: &Path, history: &WaveHistory) -> AppResult<()> {
    let mut w = create(path)?;
    for v in history.as_slice() {
        w.write_all(&v.to_le_bytes()).map_err(|e| AppError::io(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn read_history(path: &Path, n_dof: usize, stride: usize) -> AppResult<WaveHistory> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    if n_dof == 0 || bytes.len() % (8 * n_dof) != 0 {
        return Err(AppError::format(path, format!("{} bytes is not a whole number of snapshots", bytes.len())));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    WaveHistory::from_snapshots(n_dof, stride, data).map_err(|e| AppError::format(path, e.to_string()))
}

pub fn write_text(path: &Path, text: &str) -> AppResult<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| AppError::io(path, e))?;
    w.flush().map_err(|e| AppError::io(path, e))
}
