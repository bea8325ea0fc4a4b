"""A reduced BER-vs-SNR sweep written to CSV and SVG.

Run from the repository root:  python3 demos/03_sweep_and_plot.py
The full-size sweep is  fedrec sweep --out results.csv --plot results.svg
"""

from pathlib import Path

from fedrec.harness import ExperimentConfig, emit_csv, emit_plot, run_experiment

out = Path("demo_out")
out.mkdir(exist_ok=True)

for fading in ("iid", "non-iid"):
    cfg = ExperimentConfig(fading=fading, test_size=100_000)
    rep = run_experiment(cfg, log=print)
    print(rep.format_table())
    emit_csv(rep, out / f"{fading}.csv")
    emit_plot(rep, out / f"{fading}.svg", title=f"BER vs SNR ({fading})")
print("wrote", sorted(p.name for p in out.iterdir()))
