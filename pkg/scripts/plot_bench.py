"""
Plot a ``hypergs bench`` CSV: time and working memory per latent dimension, log-log, one line per method.

    python scripts/plot_bench.py out/bench.csv out/bench.png
"""
import argparse
import logging
from pathlib import Path
from typing import Dict, List

from hypergs.bench import BenchRecord, memory_growth_exponent, parse_csv, time_growth_exponent
from hypergs.logger import configure_logging, log_extra

logger = logging.getLogger('hypergs.scripts.plot_bench')


def plot(records: List[BenchRecord], path: Path) -> None:
    import matplotlib

    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    by_method: Dict[str, List[BenchRecord]] = {}
    # n = 0 has no place on a log axis
    for r in (r for r in records if r.n > 0):
        by_method.setdefault(r.method, []).append(r)

    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8), constrained_layout=True)
    for method, rows in sorted(by_method.items()):
        rows.sort(key=lambda r: r.n)
        ns = [r.n for r in rows]
        axes[0].errorbar(ns, [r.time_ms for r in rows], yerr=[r.time_std_ms for r in rows], marker='o', label=method)
        axes[1].plot(ns, [r.mem_bytes / 2**20 for r in rows], marker='o', label=method)
    for ax, ylabel in zip(axes, ('time per pass [ms]', 'working memory [MiB]')):
        ax.set_xscale('log', base=2)
        ax.set_yscale('log')
        ax.set_xlabel('latent dimension n')
        ax.set_ylabel(ylabel)
        ax.grid(True, which='both', alpha=0.3)
    axes[-1].legend(loc='best', fontsize=8)
    if records:
        fig.suptitle(f'conditioning forward + backward, G = {records[0].G}')

    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument('csv', type=Path)
    parser.add_argument('out', type=Path)
    args = parser.parse_args()
    configure_logging()

    records = parse_csv(args.csv)
    plot(records, args.out)
    for method in sorted({r.method for r in records}):
        if len({r.n for r in records if r.method == method and r.n > 0}) >= 2:
            memory = memory_growth_exponent(records, method)
            timing = time_growth_exponent(records, method)
            logger.info('growth', **log_extra(method=method, memory=round(memory, 3), time=round(timing, 3)))
    logger.info('plot written', **log_extra(path=str(args.out), records=len(records)))


if __name__ == '__main__':
    main()
