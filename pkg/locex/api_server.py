"""
Locex API Server

JSON surface over the estimation and design commands, for dashboards and
notebooks that prefer HTTP to the command line.

Endpoints:
    GET /health - Health check endpoint
    POST /premetric/validate - Check premetric axioms on a covariate sample
    POST /estimate - Local empirical estimates at query covariates
    POST /design - Pre-data partition, penalty and weight profiles

Request bodies carry the premetric as INI text under 'premetric' and rows
as lists of column-keyed objects.
"""

import configparser
import logging
import sys
from typing import Any, Dict, List, Tuple

from flask import Flask, jsonify, request
from flask_cors import CORS

from locex import __version__
from locex.cli import LOG_FORMAT, RunManifest, json_safe, run_design, run_estimate, run_validate_premetric
from locex.errors import LocexError, PremetricError, SchemaError
from locex.local_empirical import INDICATOR, ObservationSet, TestFunctionSpec
from locex.premetric import Covariate, PremetricSpec
from locex.randomization import max_block_size

logger = logging.getLogger(__name__)


def _premetric(body: Dict[str, Any]) -> PremetricSpec:
    text = body.get('premetric')
    if not isinstance(text, str):
        raise SchemaError("request needs the premetric INI text under 'premetric'")
    try:
        return PremetricSpec.from_text(text)
    except configparser.Error as e:
        raise PremetricError(f"premetric text is not valid INI: {e}") from e


def _covariates(premetric: PremetricSpec, rows: Any, key: str) -> List[Covariate]:
    if not isinstance(rows, list) or not rows:
        raise SchemaError(f"request needs a nonempty list under '{key}'")
    return [premetric.covariate_from_mapping(row) for row in rows]


def _observations(premetric: PremetricSpec, body: Dict[str, Any]) -> ObservationSet:
    rows = body.get('rows')
    column = body.get('observation', 'value')
    covariates = _covariates(premetric, rows, 'rows')
    missing = [i for i, row in enumerate(rows) if column not in row]
    if missing:
        raise SchemaError(f"rows {missing[:5]} lack the observation column '{column}'")
    return ObservationSet(covariates, [row[column] for row in rows])


def _test_function(body: Dict[str, Any]) -> TestFunctionSpec:
    h = body.get('test_function') or {}
    kind = h.get('kind', INDICATOR)
    if kind == INDICATOR and 'values' in h:
        return TestFunctionSpec.indicator_of(h['values'])
    if kind == INDICATOR:
        return TestFunctionSpec.indicator_interval(float(h.get('lower', float('-inf'))),
                                                   float(h.get('upper', float('inf'))))
    return TestFunctionSpec.linear(float(h['lower']), float(h['upper']))


class LocexAPIServer:
    """
    Flask-based API server exposing locex computations via REST endpoints.
    """

    def __init__(self, host: str = '127.0.0.1', port: int = 8080, workers: int = 1):
        """
        Initialize the API server.

        Args:
            host: Host to bind to (default: 127.0.0.1)
            port: Port to listen on (default: 8080)
            workers: Threads per request for the query axis
        """
        self.host = host
        self.port = port
        self.workers = workers

        self.app = Flask(__name__)
        CORS(self.app)

        self._register_routes()

        logger.info(f"API server initialized on {host}:{port}")

    def _handle(self, name: str, compute) -> Tuple[Any, int]:
        try:
            body = request.get_json(silent=True)
            if not isinstance(body, dict):
                raise SchemaError("request body must be a JSON object")
            return jsonify({'success': True, 'data': json_safe(compute(body))}), 200
        except (LocexError, ValueError) as e:
            logger.warning(f"Rejected {name} request: {e}")
            return jsonify({'success': False, 'error': str(e)}), 400
        except Exception as e:
            logger.error(f"Error handling {name} request: {e}")
            return jsonify({'success': False, 'error': str(e)}), 500

    def _register_routes(self) -> None:
        """Register all API routes."""

        @self.app.route('/health', methods=['GET'])
        def health():
            """Health check endpoint."""
            return jsonify({'status': 'healthy', 'version': __version__})

        @self.app.route('/premetric/validate', methods=['POST'])
        def validate():
            def compute(body: Dict[str, Any]) -> Dict[str, Any]:
                premetric = _premetric(body)
                sample = _covariates(premetric, body.get('sample'), 'sample')
                tolerance = float(body.get('tolerance', 0.0))
                return run_validate_premetric(premetric, sample, tolerance,
                                              RunManifest('validate-premetric', premetric=premetric.to_text()))

            return self._handle('validate', compute)

        @self.app.route('/estimate', methods=['POST'])
        def estimate():
            def compute(body: Dict[str, Any]) -> Dict[str, Any]:
                premetric = _premetric(body)
                data = _observations(premetric, body)
                queries = _covariates(premetric, body.get('queries'), 'queries')
                return run_estimate(
                    data, premetric, _test_function(body), queries,
                    alpha=float(body.get('alpha', 0.05)), delta=float(body.get('delta', 0.1)),
                    include_atoms=bool(body.get('atoms', False)), workers=self.workers,
                    manifest=RunManifest('estimate', premetric=premetric.to_text()),
                )

            return self._handle('estimate', compute)

        @self.app.route('/design', methods=['POST'])
        def design():
            def compute(body: Dict[str, Any]) -> Dict[str, Any]:
                premetric = _premetric(body)
                covariates = _covariates(premetric, body.get('covariates'), 'covariates')
                queries = _covariates(premetric, body['queries'], 'queries') if body.get('queries') else []
                max_size = body.get('max_block_size')
                constraint = None
                if max_size is not None:
                    constraint = max_block_size(int(max_size))
                return run_design(covariates, premetric, float(body.get('alpha', 0.05)), constraint, queries,
                                  body.get('test_function', {}).get('kind', INDICATOR),
                                  RunManifest('design', premetric=premetric.to_text()))

            return self._handle('design', compute)

    def run(self, debug: bool = False) -> None:
        """
        Start the API server.

        Args:
            debug: Enable Flask debug mode
        """
        logger.info(f"Starting API server on {self.host}:{self.port}")
        self.app.run(host=self.host, port=self.port, debug=debug)


def main():
    """Main entry point for the API server."""
    import argparse

    parser = argparse.ArgumentParser(description='Locex API Server')
    parser.add_argument('--host', default='127.0.0.1', help='Host to bind to')
    parser.add_argument('--port', type=int, default=8080, help='Port to listen on')
    parser.add_argument('--workers', type=int, default=1, help='Threads per request')
    parser.add_argument('--debug', action='store_true', help='Enable debug mode')
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT, handlers=[logging.StreamHandler(sys.stderr)])

    server = LocexAPIServer(host=args.host, port=args.port, workers=args.workers)
    server.run(debug=args.debug)


if __name__ == '__main__':
    main()
