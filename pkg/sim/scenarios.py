'''
Scenario templates are JSON documents under sim/scenarios/, one per template.

Keys (schema_version 1):
    name, schema_version, max_steps, tags
    ego:               {speed, speed_range?}
    lanes:             [{id, kind: driving|opposite|emergency|connector, width, centerline: [[x, y], ...]}]
    route:             [[x, y], ...]
    traffic_controls:  [{kind: red_light|stop_sign, trigger_zone: {x, y, yaw, half_length, half_width},
                         stop_line_arclength, phase_schedule?: [[phase, steps], ...], phase_offset_range?}]
    agents:            [{path, s0, s0_range?, speed, speed_range?, desired_speed?, behavior: reactive|scripted,
                         half_length?, half_width?, on_connector?}]
    pedestrians:       [{crossing, spawn_step, spawn_step_range?, speed, speed_range?}]
    seed_domain:       human readable list of the randomised quantities
Any *_range key makes that quantity a seeded draw at reset.
'''
import os
import json

import sys; sys.path.append('..'); sys.path.append('.')
from sim.geometry import Pose2D, OrientedBox, Polyline
from sim.microworld import Scenario, TrafficControl, AgentSpec, PedestrianEvent
from counterfactual.records import Lane

SCHEMA_VERSION = 1
SCENARIO_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'scenarios')
BUILT_IN = ('straight_follow', 'intersection_left', 'pedestrian_crossing', 'stop_sign', 'merge',
            'empty_road')


def _range(d, key):
    value = d.get(key)
    return None if value is None else tuple(value)


def scenario_from_dict(d):
    if d.get('schema_version') != SCHEMA_VERSION:
        raise ValueError('scenario ' + str(d.get('name')) + ': unsupported schema_version '
                         + str(d.get('schema_version')))
    lanes = tuple(Lane(l['id'], l['kind'], Polyline(l['centerline']), float(l['width']))
                  for l in d['lanes'])
    controls = []
    for c in d.get('traffic_controls', []):
        z = c['trigger_zone']
        zone = OrientedBox(Pose2D(z['x'], z['y'], z['yaw']), z['half_length'], z['half_width'])
        schedule = tuple((str(p), int(s)) for p, s in c.get('phase_schedule', []))
        offset_range = tuple(c.get('phase_offset_range', (0, 0)))
        controls.append(TrafficControl(c['kind'], zone, float(c['stop_line_arclength']), schedule,
                                       offset_range))
    agents = tuple(AgentSpec(Polyline(a['path']), float(a['s0']), float(a['speed']),
                             a.get('behavior', 'reactive'), a.get('desired_speed'),
                             a.get('half_length', 2.25), a.get('half_width', 0.95),
                             _range(a, 's0_range'), _range(a, 'speed_range'),
                             a.get('on_connector', False))
                   for a in d.get('agents', []))
    pedestrians = tuple(PedestrianEvent(int(p['spawn_step']), Polyline(p['crossing']), float(p['speed']),
                                        _range(p, 'spawn_step_range'), _range(p, 'speed_range'))
                        for p in d.get('pedestrians', []))
    ego = d.get('ego', {})
    return Scenario(name=d['name'], lanes=lanes, route=Polyline(d['route']),
                    traffic_controls=tuple(controls), agents_init=agents,
                    pedestrian_events=pedestrians, max_steps=int(d['max_steps']),
                    ego_speed=float(ego.get('speed', 0.0)), ego_speed_range=_range(ego, 'speed_range'),
                    seed_domain=tuple(d.get('seed_domain', [])), tags=tuple(d.get('tags', [])))


def load_scenario(name_or_path):
    '''load a built-in template by name or any scenario file by path'''
    path = name_or_path
    if not os.path.isfile(path):
        path = os.path.join(SCENARIO_DIR, str(name_or_path) + '.json')
    if not os.path.isfile(path):
        raise ValueError('no scenario named ' + str(name_or_path) + ', built-in templates are: '
                         + ', '.join(BUILT_IN))
    with open(path, 'r') as f:
        return scenario_from_dict(json.load(f))


def load_scenarios(names):
    return [load_scenario(n) for n in names]
