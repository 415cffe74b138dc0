'''
craftlab command line.

    python craftlab.py train --config configs/base.json --method craft --rounds 2 --seed 1 --out-dir runs/a
    python craftlab.py eval --checkpoint runs/a/checkpoint_round2.pth --episodes 10
    python craftlab.py snapshot-dist --checkpoint runs/a/checkpoint_pretrained.pth runs/a/checkpoint_round2.pth \
                                     --scenario pedestrian_crossing --step 3
    python craftlab.py theory-check --seeds 100

--out-dir falls back to $CRAFTLAB_OUT, then ./craftlab_out. Invalid inputs
exit with status 2, failed theory checks with status 1.
'''
import os
import json
from argparse import ArgumentParser

import sys; sys.path.append('..'); sys.path.append('.')
from sim.scenarios import load_scenario
from policy.scorer import load_checkpoint
from utils.config import load_run_config, METHODS
from trainers.train_craft import run_training
from validation.evaller import cmd_eval
from validation.distribution import cmd_snapshot_distribution
from theory.checks import run_all_checks

DEFAULT_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'configs', 'base.json')


def get_parser():
    parser = ArgumentParser(description='counterfactual fine-tuning lab for a trajectory-vocabulary driving policy')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p):
        p.add_argument("--config", default=DEFAULT_CONFIG, help='run config JSON')
        p.add_argument("--out-dir", default=None, help='output directory (default $CRAFTLAB_OUT)')
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action='append', default=[], metavar='KEY=VALUE',
                       help='config override, e.g. trainer.buffer_size=256 (value parsed as JSON)')

    train = sub.add_parser('train', help='pre-train then fine-tune')
    common(train)
    train.add_argument("--method", choices=METHODS, default=None)
    train.add_argument("--rounds", type=int, default=None)
    train.add_argument("--init", default=None, help='checkpoint to start from instead of pre-training')

    evaluate = sub.add_parser('eval', help='closed-loop evaluation with greedy selection')
    common(evaluate)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--episodes", type=int, default=None)
    evaluate.add_argument("--scenario", nargs='+', default=None)

    dist = sub.add_parser('snapshot-dist', help='vocabulary distributions at one decision step')
    common(dist)
    dist.add_argument("--checkpoint", nargs='+', required=True)
    dist.add_argument("--scenario", required=True)
    dist.add_argument("--step", type=int, required=True)

    theory = sub.add_parser('theory-check', help='numerical checks of the gradient results')
    theory.add_argument("--seeds", type=int, default=100)
    theory.add_argument("--seed", type=int, default=0)
    theory.add_argument("--dual-clip-samples", type=int, default=10**6)
    theory.add_argument("--out-dir", default=None)
    return parser


def out_dir_from(args):
    if args.out_dir is not None:
        return args.out_dir
    return os.environ.get('CRAFTLAB_OUT', 'craftlab_out')


def parse_overrides(pairs):
    overrides = {}
    for pair in pairs:
        if '=' not in pair:
            raise ValueError('override ' + repr(pair) + ' is not KEY=VALUE')
        key, value = pair.split('=', 1)
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    return overrides


def cmd_train(args):
    overrides = parse_overrides(args.set)
    overrides.update({'trainer.method': args.method, 'trainer.total_rounds': args.rounds, 'seed': args.seed})
    run_config = load_run_config(args.config, overrides)
    init = None
    if args.init is not None:
        init, _, _, _ = load_checkpoint(args.init, run_config.vocab)
    checkpoint, metrics = run_training(run_config, out_dir_from(args), init)
    print('Final checkpoint: ' + checkpoint)
    print('Metrics: ' + metrics)
    return 0


def cmd_evaluate(args):
    overrides = parse_overrides(args.set)
    overrides.update({'eval.episodes': args.episodes, 'eval.seed': args.seed})
    run_config = load_run_config(args.config, overrides)
    scenarios = args.scenario if args.scenario is not None else list(run_config.eval_scenarios)
    report = cmd_eval(args.checkpoint, scenarios, run_config.eval.episodes, run_config.eval.seed, run_config,
                      out_dir_from(args))
    if len(report.summary) == 0:
        print('No episodes evaluated')
    else:
        print(report.summary.to_string(index=False))
    return 0


def cmd_distribution(args):
    run_config = load_run_config(args.config, parse_overrides(args.set))
    seed = run_config.seed if args.seed is None else args.seed
    path, df = cmd_snapshot_distribution(args.checkpoint, load_scenario(args.scenario), args.step,
                                         out_dir_from(args), seed, run_config.vocab, run_config.world,
                                         run_config.trainer.decision_interval)
    print('Wrote ' + path)
    return 0


def cmd_theory(args):
    table = run_all_checks(args.seeds, args.seed, args.dual_clip_samples)
    print(table.to_string(index=False))
    out_dir = out_dir_from(args)
    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    with open(os.path.join(out_dir, 'theory_report.json'), 'w') as f:
        json.dump(json.loads(table.to_json(orient='records', double_precision=15)), f, indent=2)
    return 0 if bool(table['passed'].all()) else 1


COMMANDS = {'train': cmd_train, 'eval': cmd_evaluate, 'snapshot-dist': cmd_distribution, 'theory-check': cmd_theory}


def main(argv=None):
    args = get_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ValueError as e:
        print('error: ' + str(e), file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(main())
