# config.py -
#   handles getting/setting of sparsewm configuration values.
#   values come from the defaults below, overlaid by a TOML manifest,
#   overlaid by command line overrides.
#

import copy
import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from sparsewm.errors import ConfigError
from sparsewm._version import __version__


class Config(object):
    defaults = {
        'seed': 0,                   # master seed; every rng stream derives from it
        'debug': False,              # debug logging
        'env': {
            'grid': 16,              # frame side G in pixels
            'patch': 4,              # patch side P; N = (G/P)^2 tokens
            'token_dim': 16,         # tokenizer output dimension D
            'wall_x': 0.5,           # wall position, fixed for every episode
            'gap_lo': 0.35,          # door gap, lower edge
            'gap_hi': 0.65,          # door gap, upper edge
            'agent_radius_px': 1.5,  # solid core of the agent disc
            'agent_falloff_px': 6.0, # linear halo around the core
            'a_max': 0.1,            # per-axis action bound
            'tokenizer_seed': 1234,
            'success_radius': 0.1,   # L2 distance to goal counted as success
        },
        'model': {
            'n_layers': 2,
            'n_heads': 4,
            'embed_dim': 64,
            'action_proj_dim': 8,
            'history_len': 2,        # h; the model sees h+1 frames
            'dropout': 0.1,          # residual-stream dropout while training
        },
        'train': {
            'mask_policy': 'grouped',
            'steps': 3000,
            'batch_size': 64,
            'lr': 5e-4,
            'dtype': 'float32',
            'log_every': 100,
            'episodes': 500,
            'ep_len': 50,
        },
        'plan': {
            'samples': 100,          # K
            'elites': 10,            # E
            'iterations': 10,        # M
            'horizon': 5,            # H
            'max_mpc': 10,
            'drop_ratio': 0.0,
            'strategy': 'random',
            'replan': True,
            'std_floor': 1e-3,
        },
        'bench': {
            'checkpoint': '',
            'strategies': ['random'],
            'drop_ratios': [0.0, 0.3, 0.5, 0.9],
            'episodes': 30,
            'workers': 1,
            'timing_serial': False,
            'out': 'bench',
        },
        'analysis': {
            'ratios': [0.0, 0.3, 0.5, 0.9],
            'hsic_batch': 128,
            'hsic_masks': 20,
            'probe_dim': 32,
            'probe_heads': 4,
            'probe_epochs': 200,
            'probe_samples': 2000,   # observations drawn for each probe run
            'probe_lr': 1e-3,
            'probe_trials': 5,
            'prederr_trials': 5,
            'noise_sigmas': [0.0, 0.5, 2.0],
            'noise_drops': [0.0, 0.5],
            'noise_episodes': 30,
        },
    }

    def __init__(self, path=None):
        self.path = path
        self.version = __version__
        self.config = {}
        if path:
            self.read(path)

    def read(self, path):
        try:
            with open(path, 'rb') as f:
                loaded = tomllib.load(f)
        except OSError as e:
            raise ConfigError("Failed to read config file " + str(path) + ": " + str(e.strerror))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError("Failed to parse config file " + str(path) + ": " + str(e))
        self._check_keys(loaded, self.defaults, '')
        self.config = loaded

    def _check_keys(self, loaded, defaults, prefix):
        for key, value in loaded.items():
            if key not in defaults:
                raise ConfigError("Unknown config key: " + prefix + key)
            if isinstance(defaults[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError("Config key " + prefix + key + " must be a table")
                self._check_keys(value, defaults[key], prefix + key + '.')

    def write(self, path):
        try:
            with open(path + ".tmp", 'w') as f:
                json.dump(self.effective(), f, indent=4, sort_keys=True)
            os.replace(path + ".tmp", path)
        except OSError as e:
            raise ConfigError("Failed to write config file: " + str(e.strerror))

    @staticmethod
    def _lookup(tree, parts):
        for p in parts:
            if not isinstance(tree, dict) or p not in tree:
                return None, False
            tree = tree[p]
        return tree, True

    def get(self, key):
        parts = key.split('.')
        value, found = self._lookup(self.effective(), parts)
        if not found:
            raise ConfigError("Unknown config key: " + key)
        return value

    def set(self, key, value):
        parts = key.split('.')
        _, known = self._lookup(self.defaults, parts)
        if not known:
            raise ConfigError("Unknown config key: " + key)
        tree = self.config
        for p in parts[:-1]:
            tree = tree.setdefault(p, {})
        tree[parts[-1]] = value

    def unset(self, key):
        parts = key.split('.')
        tree, found = self._lookup(self.config, parts[:-1])
        if found and parts[-1] in tree:
            del tree[parts[-1]]

    def effective(self):
        '''returns the merged configuration as a plain dict'''
        def merge(base, over):
            out = copy.deepcopy(base)
            for k, v in over.items():
                if isinstance(v, dict) and isinstance(out.get(k), dict):
                    out[k] = merge(out[k], v)
                else:
                    out[k] = copy.deepcopy(v)
            return out
        return merge(self.defaults, self.config)

    def digest(self):
        blob = json.dumps(self.effective(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(blob.encode('utf-8')).hexdigest()

    def env_config(self):
        from sparsewm.envsim import EnvConfig
        return EnvConfig(**self.get('env'))

    def model_config(self):
        from sparsewm.worldmodel import ModelConfig
        env = self.env_config()
        return ModelConfig(n_tokens=env.n_tokens,
                           token_dim=env.token_dim, action_dim=2, **self.get('model'))

    def plan_config(self):
        from sparsewm.planner import PlanConfig
        p = self.get('plan')
        return PlanConfig(samples=p['samples'], elites=p['elites'], iterations=p['iterations'],
                          horizon=p['horizon'], max_mpc=p['max_mpc'], drop_ratio=p['drop_ratio'],
                          strategy=p['strategy'], replan=p['replan'], std_floor=p['std_floor'])

    def run_config(self):
        from sparsewm.bench import RunConfig
        b = self.get('bench')
        return RunConfig(env=self.env_config(), plan=self.plan_config(),
                         checkpoint=b['checkpoint'], strategies=list(b['strategies']),
                         drop_ratios=[float(r) for r in b['drop_ratios']],
                         episodes=b['episodes'], seed=self.get('seed'), out=b['out'],
                         workers=b['workers'], timing_serial=b['timing_serial'])
