#!/usr/bin/env python3
#
# sparsewm.py -
#   primary entry point for the sparsewm tools: dataset generation, world
#   model training, planning, benchmarks and analyses
#

import argparse
import sys
import textwrap
from dataclasses import replace

import numpy as np

from sparsewm import analysis, bench, envsim, planner, worldmodel
from sparsewm.config import Config
from sparsewm.errors import ConfigError, SparseWMError
from sparsewm.logger import log, debug, set_debug
from sparsewm.tokensel import STRATEGIES
from sparsewm._version import __version__


def ratio_list(text):
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers, got " + repr(text))


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help="master seed (overrides the manifest)")
    common.add_argument('--config', '--env-config', dest='config',
                        help="TOML manifest with configuration overrides")
    common.add_argument('--out', help="output file or directory")
    common.add_argument('--debug', action='store_true', help="enable debug logging")

    parser = argparse.ArgumentParser(
        prog='sparsewm',
        description=textwrap.dedent("""\
                                    World-model planning with sparse imagination.
                                    Every subcommand reads its defaults from the configuration;
                                    flags override single values."""))
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', parents=[common], help="generate a random-action dataset")
    p.add_argument('--episodes', type=int)
    p.add_argument('--ep-len', type=int, dest='ep_len')
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--preview', type=int, default=0, metavar='N',
                   help="also write the first N episodes as PNG strips")

    p = sub.add_parser('train', parents=[common], help="train a world model on a dataset")
    p.add_argument('--dataset', required=True)
    p.add_argument('--mask-policy', choices=worldmodel.MASK_POLICIES, dest='mask_policy')
    p.add_argument('--steps', type=int)

    p = sub.add_parser('plan', parents=[common], help="run MPC episodes with one strategy")
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--strategy', choices=STRATEGIES)
    p.add_argument('--drop-ratio', type=float, dest='drop_ratio')
    p.add_argument('--episodes', type=int, default=30)
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--no-replan', action='store_true', dest='no_replan',
                   help="plan once with plain CEM and execute open loop")

    p = sub.add_parser('bench', parents=[common], help="benchmark strategies over drop ratios")
    p.add_argument('--checkpoint')
    p.add_argument('--strategies', type=lambda s: s.split(','))
    p.add_argument('--drop-ratios', type=ratio_list, dest='drop_ratios')
    p.add_argument('--episodes', type=int)
    p.add_argument('--workers', type=int)
    p.add_argument('--timing-serial', action='store_true', dest='timing_serial')

    p = sub.add_parser('analyze', parents=[common], help="dependence, probing and robustness analyses")
    p.add_argument('analysis', choices=('hsic', 'probe', 'prederr', 'noise'))
    p.add_argument('--checkpoint')
    p.add_argument('--dataset')
    p.add_argument('--ratios', type=ratio_list)
    p.add_argument('--episodes', type=int)
    return parser


def load_config(options):
    cfg = Config(options.config)
    if options.seed is not None:
        cfg.set('seed', options.seed)
    if options.debug:
        cfg.set('debug', True)
    set_debug(cfg.get('debug'))
    return cfg


def require(value, flag):
    if not value:
        raise ConfigError("missing " + flag)
    return value


def gen_data(cfg, options):
    env = cfg.env_config()
    n = options.episodes or cfg.get('train.episodes')
    ep_len = options.ep_len or cfg.get('train.ep_len')
    out = options.out or 'dataset.spwm'
    ds = envsim.generate_dataset(env, n, ep_len, cfg.get('seed'), workers=options.workers)
    envsim.write_dataset(out, ds)
    if options.preview:
        envsim.write_preview(out + ".preview", ds, options.preview)
    log("Wrote %d episodes to %s." % (len(ds), out))


def train(cfg, options):
    if options.mask_policy:
        cfg.set('train.mask_policy', options.mask_policy)
    if options.steps:
        cfg.set('train.steps', options.steps)
    t = cfg.get('train')
    ds = envsim.read_dataset(options.dataset)
    mcfg = replace(cfg.model_config(), n_tokens=ds.cfg.n_tokens, token_dim=ds.cfg.token_dim)
    rng = np.random.default_rng([cfg.get('seed'), 1])
    params = worldmodel.ModelParams.init(mcfg, rng, dtype=np.dtype(t['dtype']))
    windows = ds.windows(mcfg.history_len)
    losses = worldmodel.fit(params, windows, t['steps'], t['batch_size'], rng,
                            mask_policy=t['mask_policy'], lr=t['lr'], log_every=t['log_every'])
    out = options.out or 'model.spwm'
    params.save(out, t['mask_policy'])
    log("Final loss %.5f; wrote checkpoint %s." % (float(np.mean(losses[-10:])), out))


def plan(cfg, options):
    if options.strategy:
        cfg.set('plan.strategy', options.strategy)
    if options.drop_ratio is not None:
        cfg.set('plan.drop_ratio', options.drop_ratio)
    if options.no_replan:
        cfg.set('plan.replan', False)
    params, _ = worldmodel.ModelParams.load(options.checkpoint)
    pcfg = cfg.plan_config()
    outcomes = planner.evaluate(params, cfg.env_config(), pcfg, options.episodes, cfg.get('seed'),
                                workers=options.workers)
    rows = bench.episode_rows(outcomes, pcfg.strategy, pcfg.drop_ratio)
    log("Success rate %.3f over %d episodes." % (np.mean([r['success'] for r in rows]), len(rows)))
    bench.write_rows(options.out or 'results.csv', rows, bench.EPISODE_COLUMNS)


def run_bench(cfg, options):
    for key in ('checkpoint', 'strategies', 'drop_ratios', 'episodes', 'workers'):
        value = getattr(options, key)
        if value:
            cfg.set('bench.' + key, value)
    if options.timing_serial:
        cfg.set('bench.timing_serial', True)
    if options.out:
        cfg.set('bench.out', options.out)
    manifest = {'config': cfg.effective(), 'digest': cfg.digest(), 'seed': cfg.get('seed')}
    bench.run_bench(cfg.run_config(), manifest=manifest)


def analyze(cfg, options):
    a = cfg.get('analysis')
    ratios = options.ratios or a['ratios']
    rng = np.random.default_rng([cfg.get('seed'), 2])
    out = options.out or options.analysis + '.csv'
    if options.analysis == 'noise':
        params, _ = worldmodel.ModelParams.load(require(options.checkpoint, '--checkpoint'))
        env, pcfg = cfg.env_config(), cfg.plan_config()
        episodes = options.episodes or a['noise_episodes']
        rows = analysis.noise_robustness(params, env, pcfg, a['noise_sigmas'], a['noise_drops'],
                                         episodes, cfg.get('seed'))
        base = analysis.random_action_baseline(env, pcfg, episodes, cfg.get('seed'))
        log("Random-action baseline success rate %.3f." % base)
        rows.append({'sigma': 'random-actions', 'drop': '', 'success_rate': base, 'episodes': episodes})
        bench.write_rows(out, rows, ('sigma', 'drop', 'success_rate', 'episodes'))
        return
    ds = envsim.read_dataset(require(options.dataset, '--dataset'))
    if options.analysis == 'hsic':
        tokens, states = ds.observations()
        rows = analysis.hsic_sweep(tokens, states, ratios, a['hsic_masks'], a['hsic_batch'], rng)
        bench.write_rows(out, rows, ('ratio', 'mean', 'std'))
    elif options.analysis == 'probe':
        tokens, states = ds.observations()
        idx = rng.choice(len(tokens), size=min(a['probe_samples'], len(tokens)), replace=False)
        rows = analysis.probe_sweep(tokens[idx], states[idx], ratios, a['probe_trials'], rng,
                                    epochs=a['probe_epochs'], dim=a['probe_dim'],
                                    heads=a['probe_heads'], lr=a['probe_lr'])
        bench.write_rows(out, rows, ('ratio', 'mean', 'std'))
    else:
        params, policy = worldmodel.ModelParams.load(require(options.checkpoint, '--checkpoint'))
        windows = ds.windows(params.cfg.history_len)
        debug("Model trained with the %s mask policy." % policy)
        rows = analysis.prediction_error(params, windows, ratios, a['prederr_trials'], rng)
        bench.write_rows(out, rows, ('ratio', 'mean', 'std', 'excluded'))


commands = {
    'gen-data': gen_data,
    'train': train,
    'plan': plan,
    'bench': run_bench,
    'analyze': analyze,
}


# start here.
def main(argv=None):
    options = make_parser().parse_args(argv)
    try:
        cfg = load_config(options)
        debug("Effective configuration digest " + cfg.digest())
        commands[options.command](cfg, options)
    except ConfigError as e:
        log("Configuration error: " + str(e))
        return 2
    except (SparseWMError, OSError) as e:
        log("Error: " + str(e))
        return 3
    return 0


if __name__ == '__main__':
    sys.exit(main())
